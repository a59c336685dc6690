//! The frame-level noise predictor, condition dropout and the Adam optimizer.

use alloc::vec;
use alloc::vec::Vec;

use crate::clip::{FlowCond, FrameGeometry, SemanticCond};
use crate::error::{CoreError, CoreResult};
use crate::nn::{Cache, NetConfig, NetInput, Network, ParamLayout};
use crate::real::Real;
use crate::rng::Rng;

pub const TIME_DIM: usize = 32;
pub const EMB_DIM: usize = 64;
/// Dropout probability of each condition during training.
pub const DEFAULT_P_DROP: f64 = 0.1;

/// A batch of noise-prediction queries. All slices share the batch length.
#[derive(Debug, Clone, Copy)]
pub struct EpsBatch<'a, R> {
    /// `[B][C][H*W]`
    pub x: &'a [R],
    pub t: &'a [usize],
    pub flows: &'a [FlowCond<'a>],
    pub classes: &'a [SemanticCond],
}

impl<R> EpsBatch<'_, R> {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// A differentiable noise predictor over frames.
pub trait EpsModel<R: Real> {
    type Tape;

    fn geometry(&self) -> FrameGeometry;

    fn param_count(&self) -> usize;

    fn eps_forward(&self, theta: &[R], batch: &EpsBatch<'_, R>)
        -> CoreResult<(Vec<R>, Self::Tape)>;

    /// Accumulates the vector-Jacobian product `dy^T d eps / d theta` into `grad`.
    fn eps_backward(&self, theta: &[R], tape: &Self::Tape, dy: &[R], grad: &mut [R]);

    fn eps(&self, theta: &[R], batch: &EpsBatch<'_, R>) -> CoreResult<Vec<R>> {
        self.eps_forward(theta, batch).map(|(y, _)| y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub geometry: FrameGeometry,
    pub classes: usize,
    pub width: usize,
    pub depth: usize,
}

/// Noise predictor for single frames conditioned on a flow field and a class.
///
/// The flow enters as two extra input channels (scaled by `4 / max(H, W)`)
/// plus a third indicator channel that is 1 for the null flow label, in
/// which case the flow channels are zero. The class and the diffusion step
/// enter through an embedding that modulates every hidden layer.
#[derive(Debug, Clone)]
pub struct FrameDenoiser {
    cfg: DenoiserConfig,
    net: Network,
    flow_scale: f32,
}

impl FrameDenoiser {
    pub fn new(cfg: DenoiserConfig) -> CoreResult<Self> {
        let g = cfg.geometry;
        let net = Network::new(NetConfig {
            data_channels: g.channels,
            cond_channels: 3,
            height: g.height,
            width: g.width,
            base_width: cfg.width,
            levels: cfg.depth,
            classes: cfg.classes,
            time_dim: TIME_DIM,
            emb_dim: EMB_DIM,
        })?;
        Ok(FrameDenoiser {
            cfg,
            net,
            flow_scale: 4.0 / g.height.max(g.width) as f32,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ParamLayout {
        self.net.layout()
    }

    pub fn geometry(&self) -> FrameGeometry {
        self.cfg.geometry
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn init<R: Real>(&self, rng: &mut Rng) -> Vec<R> {
        self.net.init(rng)
    }

    fn cond_channels<R: Real>(&self, flows: &[FlowCond<'_>]) -> CoreResult<Vec<R>> {
        let g = self.cfg.geometry;
        let p = g.pixels();
        let mut cond = vec![R::zero(); flows.len() * 3 * p];
        for (b, f) in flows.iter().enumerate() {
            let dst = &mut cond[b * 3 * p..(b + 1) * 3 * p];
            match f {
                Some(f) => {
                    if f.height() != g.height || f.width() != g.width {
                        return Err(CoreError::ShapeMismatch(alloc::format!(
                            "flow is {}x{}, frames are {}x{}",
                            f.height(),
                            f.width(),
                            g.height,
                            g.width
                        )));
                    }
                    for (d, &v) in dst[..2 * p].iter_mut().zip(f.data()) {
                        *d = R::of((v * self.flow_scale) as f64);
                    }
                }
                None => dst[2 * p..].iter_mut().for_each(|v| *v = R::one()),
            }
        }
        Ok(cond)
    }

    /// Noise prediction for one frame.
    pub fn predict_eps<R: Real>(
        &self,
        theta: &[R],
        x_t: &[R],
        t: usize,
        y: FlowCond<'_>,
        c: SemanticCond,
    ) -> CoreResult<Vec<R>> {
        self.eps(
            theta,
            &EpsBatch {
                x: x_t,
                t: &[t],
                flows: &[y],
                classes: &[c],
            },
        )
    }
}

impl<R: Real> EpsModel<R> for FrameDenoiser {
    type Tape = Cache<R>;

    fn geometry(&self) -> FrameGeometry {
        self.cfg.geometry
    }

    fn param_count(&self) -> usize {
        self.net.param_count()
    }

    fn eps_forward(&self, theta: &[R], batch: &EpsBatch<'_, R>) -> CoreResult<(Vec<R>, Cache<R>)> {
        let b = batch.len();
        if batch.flows.len() != b || batch.classes.len() != b {
            return Err(CoreError::ShapeMismatch("ragged eps batch".into()));
        }
        if batch.x.len() != b * self.cfg.geometry.len() {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "x has {} values for a batch of {b} frames of {}",
                batch.x.len(),
                self.cfg.geometry.len()
            )));
        }
        let cond = self.cond_channels(batch.flows)?;
        let class = batch
            .classes
            .iter()
            .map(|c| c.index(self.cfg.classes))
            .collect::<CoreResult<Vec<_>>>()?;
        let out = self.net.forward_cached(
            theta,
            &NetInput {
                x: batch.x,
                cond: &cond,
                t: batch.t,
                class: &class,
            },
        )?;
        if out.0.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("noise prediction"));
        }
        Ok(out)
    }

    fn eps_backward(&self, theta: &[R], tape: &Cache<R>, dy: &[R], grad: &mut [R]) {
        self.net.backward(theta, tape, dy, grad)
    }
}

/// Independently replaces the flow and the class by their null labels, each
/// with probability `p_drop`.
pub fn drop_conditions<'a>(
    rng: &mut Rng,
    y: FlowCond<'a>,
    c: SemanticCond,
    p_drop: f64,
) -> (FlowCond<'a>, SemanticCond) {
    debug_assert!((0.0..1.0).contains(&p_drop));
    let y = if rng.bernoulli(p_drop) { None } else { y };
    let c = if rng.bernoulli(p_drop) {
        SemanticCond::Null
    } else {
        c
    };
    (y, c)
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<R> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<R>,
    pub v: Vec<R>,
}

impl<R: Real> Adam<R> {
    pub fn new(params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![R::zero(); params],
            v: vec![R::zero(); params],
        }
    }

    pub fn update(&mut self, theta: &mut [R], grad: &[R]) -> CoreResult<()> {
        if !(self.lr > 0.0) {
            return Err(CoreError::InvalidRange(alloc::format!(
                "learning rate {}",
                self.lr
            )));
        }
        if theta.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(CoreError::ShapeMismatch("optimizer state size".into()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(CoreError::NonFinite("gradient"));
        }
        self.step += 1;
        let (b1, b2) = (R::of(self.beta1), R::of(self.beta2));
        let c1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        let step_size = R::of(self.lr / c1);
        let c2_sqrt = R::of(libm::sqrt(c2));
        let eps = R::of(self.eps);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (R::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (R::one() - b2) * g * g;
            let upd = step_size * self.m[i] / (self.v[i].sqrt() / c2_sqrt + eps);
            theta[i] -= upd;
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("parameter update"));
        }
        Ok(())
    }
}
