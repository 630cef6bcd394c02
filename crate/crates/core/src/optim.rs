//! Parameter update rules: Adam, plain gradient descent and RMSprop.
//!
//! All three operate on the flat slot layout of [`ModelParams`]
//! (see [`crate::nn::SLOT_NAMES`]), so optimizer state is congruent with
//! the model by construction and verified on every step.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{GradientStore, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Gd,
    RmsProp,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Gd => "gd",
            OptimizerKind::RmsProp => "rmsprop",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "gd" => Ok(OptimizerKind::Gd),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            other => Err(Error::InvalidConfig(format!(
                "unknown optimizer {other:?} (expected adam, gd or rmsprop)"
            ))),
        }
    }
}

/// Hyperparameters of a single optimizer. `beta1`/`beta2` only apply to
/// Adam, `decay_rate` only to RMSprop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub decay_rate: f64,
    pub eps: f64,
    /// Optional global-norm gradient clipping (off by default).
    pub clip_norm: Option<f64>,
    /// Optional per-step exponential learning-rate decay: step `t` uses
    /// `lr * factor^(t-1)`. Off (constant lr) by default.
    pub lr_decay: Option<f64>,
}

impl OptimizerConfig {
    /// Canonical defaults per optimizer: Adam lr 0.001 (beta 0.9/0.999),
    /// RMSprop lr 0.001 (decay 0.9), GD lr 0.01. eps is 1e-8 everywhere.
    pub fn for_kind(kind: OptimizerKind) -> Self {
        Self {
            kind,
            lr: match kind {
                OptimizerKind::Gd => 0.01,
                _ => 0.001,
            },
            beta1: 0.9,
            beta2: 0.999,
            decay_rate: 0.9,
            eps: 1e-8,
            clip_norm: None,
            lr_decay: None,
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lr must be > 0, got {}",
                self.lr
            )));
        }
        for (name, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("decay-rate", self.decay_rate),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be in [0, 1), got {v}"
                )));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "eps must be > 0, got {}",
                self.eps
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "clip norm must be > 0, got {c}"
                )));
            }
        }
        if let Some(d) = self.lr_decay {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "lr decay must be in (0, 1], got {d}"
                )));
            }
        }
        Ok(())
    }
}

/// Moment accumulators, shape-congruent with the model's flat slots.
/// GD keeps no accumulators; RMSprop keeps the squared-gradient cache in
/// `v`; Adam keeps first moments in `m` and second moments in `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl OptimizerState {
    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Zeroed accumulators for `params` under `cfg`, step counter 0.
pub fn init_state(params: &ModelParams, cfg: &OptimizerConfig) -> OptimizerState {
    let sizes: Vec<usize> = params.flat().iter().map(|s| s.len()).collect();
    let zeroed = || sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
    let (m, v) = match cfg.kind {
        OptimizerKind::Gd => (Vec::new(), Vec::new()),
        OptimizerKind::RmsProp => (Vec::new(), zeroed()),
        OptimizerKind::Adam => (zeroed(), zeroed()),
    };
    OptimizerState {
        kind: cfg.kind,
        m,
        v,
        t: 0,
    }
}

fn check_congruent(
    slots: &[&mut [f64]],
    grads: &[&[f64]],
    state: &OptimizerState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if state.kind != cfg.kind {
        return Err(Error::InvalidConfig(format!(
            "optimizer state was initialized for {} but used with {}",
            state.kind, cfg.kind
        )));
    }
    if grads.len() != slots.len() || grads.iter().zip(slots).any(|(g, p)| g.len() != p.len()) {
        return Err(Error::Dimension {
            what: "gradient store",
            expected: "shape-congruent with params".into(),
            got: "mismatched slots".into(),
        });
    }
    for acc in [&state.m, &state.v] {
        if !acc.is_empty()
            && (acc.len() != slots.len() || acc.iter().zip(slots).any(|(a, p)| a.len() != p.len()))
        {
            return Err(Error::Dimension {
                what: "optimizer state",
                expected: "shape-congruent with params".into(),
                got: "mismatched accumulators".into(),
            });
        }
    }
    Ok(())
}

/// Applies one update step in place.
///
/// GD: `p -= lr * g`. RMSprop: `cache = d*cache + (1-d)*g^2;
/// p -= lr * g / (sqrt(cache) + eps)`. Adam: first/second moments with
/// bias correction, `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
/// With `lr_decay` set, step `t` scales `lr` by `factor^(t-1)`.
pub fn step(
    params: &mut ModelParams,
    grads: &GradientStore,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    cfg.validate()?;
    let gslots = grads.flat();
    let mut pslots = params.flat_mut();
    check_congruent(&pslots, &gslots, state, cfg)?;

    let clip_scale = match cfg.clip_norm {
        Some(limit) => {
            let norm = grads.global_norm();
            if norm > limit {
                limit / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };

    state.t += 1;
    let lr = match cfg.lr_decay {
        Some(d) => cfg.lr * d.powi((state.t - 1) as i32),
        None => cfg.lr,
    };
    match cfg.kind {
        OptimizerKind::Gd => {
            for (p, g) in pslots.iter_mut().zip(&gslots) {
                for (pv, gv) in p.iter_mut().zip(*g) {
                    *pv -= lr * (gv * clip_scale);
                }
            }
        }
        OptimizerKind::RmsProp => {
            for ((p, g), cache) in pslots.iter_mut().zip(&gslots).zip(&mut state.v) {
                for ((pv, gv), cv) in p.iter_mut().zip(*g).zip(cache) {
                    let gc = gv * clip_scale;
                    *cv = cfg.decay_rate * *cv + (1.0 - cfg.decay_rate) * gc * gc;
                    *pv -= lr * gc / (cv.sqrt() + cfg.eps);
                }
            }
        }
        OptimizerKind::Adam => {
            let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
            for (((p, g), m), v) in pslots
                .iter_mut()
                .zip(&gslots)
                .zip(&mut state.m)
                .zip(&mut state.v)
            {
                for (((pv, gv), mv), vv) in p.iter_mut().zip(*g).zip(m.iter_mut()).zip(v.iter_mut())
                {
                    let gc = gv * clip_scale;
                    *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gc;
                    *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gc * gc;
                    let m_hat = *mv / bc1;
                    let v_hat = *vv / bc2;
                    *pv -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_setup(theta: f64, grad: f64) -> (ModelParams, GradientStore) {
        let mut params = ModelParams::zeros(2, 1, 1, 1);
        params.embedding[[0, 0]] = theta;
        let mut grads = GradientStore::zeros_like(&params);
        grads.embedding[[0, 0]] = grad;
        (params, grads)
    }

    #[test]
    fn gd_textbook_step() {
        let (mut params, grads) = scalar_setup(1.0, 2.0);
        let cfg = OptimizerConfig::for_kind(OptimizerKind::Gd).with_lr(0.1);
        let mut state = init_state(&params, &cfg);
        step(&mut params, &grads, &mut state, &cfg).unwrap();
        assert!((params.embedding[[0, 0]] - 0.8).abs() < 1e-15);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn lr_decay_halves_successive_gd_steps() {
        let (mut params, grads) = scalar_setup(1.0, 1.0);
        let mut cfg = OptimizerConfig::for_kind(OptimizerKind::Gd).with_lr(0.1);
        cfg.lr_decay = Some(0.5);
        let mut state = init_state(&params, &cfg);
        step(&mut params, &grads, &mut state, &cfg).unwrap();
        assert!((params.embedding[[0, 0]] - 0.9).abs() < 1e-15);
        step(&mut params, &grads, &mut state, &cfg).unwrap();
        assert!((params.embedding[[0, 0]] - 0.85).abs() < 1e-15);
        step(&mut params, &grads, &mut state, &cfg).unwrap();
        assert!((params.embedding[[0, 0]] - 0.825).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_a_bounded_sign_step() {
        let (mut params, grads) = scalar_setup(0.0, 5.0);
        let cfg = OptimizerConfig::for_kind(OptimizerKind::Adam);
        let mut state = init_state(&params, &cfg);
        step(&mut params, &grads, &mut state, &cfg).unwrap();
        let delta = -params.embedding[[0, 0]];
        assert!(delta > 0.000999 && delta < 0.001, "delta {delta}");
    }

    #[test]
    fn adam_early_steps_bounded_by_lr() {
        let (mut params, grads) = scalar_setup(0.0, 3.5);
        let cfg = OptimizerConfig::for_kind(OptimizerKind::Adam);
        let mut state = init_state(&params, &cfg);
        let mut prev = 0.0;
        for _ in 0..20 {
            step(&mut params, &grads, &mut state, &cfg).unwrap();
            let moved = (params.embedding[[0, 0]] - prev).abs();
            assert!(moved <= cfg.lr * 1.01, "per-step move {moved}");
            prev = params.embedding[[0, 0]];
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        for kind in [
            OptimizerKind::Adam,
            OptimizerKind::Gd,
            OptimizerKind::RmsProp,
        ] {
            let (mut params, grads) = scalar_setup(1.25, 0.0);
            let cfg = OptimizerConfig::for_kind(kind);
            let mut state = init_state(&params, &cfg);
            for _ in 0..3 {
                step(&mut params, &grads, &mut state, &cfg).unwrap();
            }
            assert_eq!(params.embedding[[0, 0]], 1.25, "{kind}");
        }
    }

    #[test]
    fn init_state_is_zeroed_and_deterministic() {
        let params = ModelParams::zeros(3, 2, 2, 2);
        let cfg = OptimizerConfig::for_kind(OptimizerKind::Adam);
        let a = init_state(&params, &cfg);
        let b = init_state(&params, &cfg);
        assert_eq!(a, b);
        assert_eq!(a.step_count(), 0);
        assert!(a.m.iter().flatten().all(|&x| x == 0.0));
        assert!(a.v.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let (mut pa, grads) = scalar_setup(0.7, 1.3);
        let mut pb = pa.clone();
        let cfg = OptimizerConfig::for_kind(OptimizerKind::RmsProp);
        let mut sa = init_state(&pa, &cfg);
        let mut sb = init_state(&pb, &cfg);
        for _ in 0..5 {
            step(&mut pa, &grads, &mut sa, &cfg).unwrap();
            step(&mut pb, &grads, &mut sb, &cfg).unwrap();
        }
        assert_eq!(pa, pb);
        assert_eq!(sa, sb);
    }

    #[test]
    fn state_mismatch_is_rejected() {
        let (mut params, grads) = scalar_setup(1.0, 1.0);
        let adam = OptimizerConfig::for_kind(OptimizerKind::Adam);
        let gd = OptimizerConfig::for_kind(OptimizerKind::Gd);
        let mut state = init_state(&params, &gd);
        assert!(step(&mut params, &grads, &mut state, &adam).is_err());

        let other = ModelParams::zeros(4, 2, 2, 3);
        let mut wrong = init_state(&other, &adam);
        assert!(step(&mut params, &grads, &mut wrong, &adam).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = OptimizerConfig::for_kind(OptimizerKind::Adam);
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        cfg = OptimizerConfig::for_kind(OptimizerKind::Adam);
        cfg.beta2 = 1.0;
        assert!(cfg.validate().is_err());
        cfg = OptimizerConfig::for_kind(OptimizerKind::RmsProp);
        cfg.eps = 0.0;
        assert!(cfg.validate().is_err());
        cfg = OptimizerConfig::for_kind(OptimizerKind::Gd);
        cfg.lr_decay = Some(0.0);
        assert!(cfg.validate().is_err());
        cfg.lr_decay = Some(1.5);
        assert!(cfg.validate().is_err());
        assert!("momentum".parse::<OptimizerKind>().is_err());
        assert_eq!(
            "rmsprop".parse::<OptimizerKind>().unwrap(),
            OptimizerKind::RmsProp
        );
    }

    #[test]
    fn clipping_rescales_large_gradients() {
        let (mut params, grads) = scalar_setup(1.0, 10.0);
        let mut cfg = OptimizerConfig::for_kind(OptimizerKind::Gd).with_lr(0.1);
        cfg.clip_norm = Some(2.0);
        let mut state = init_state(&params, &cfg);
        step(&mut params, &grads, &mut state, &cfg).unwrap();
        // gradient norm 10 clipped to 2
        assert!((params.embedding[[0, 0]] - 0.8).abs() < 1e-15);
    }
}
