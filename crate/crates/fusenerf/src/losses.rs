//! The three training losses and their weighted total.
//!
//! Per ray batch `R` with rendered colors `C~` and ground truths `C`:
//!
//! * RGB reconstruction:      `L_rgb = (1/|R|) sum ||C~_rgb - C_rgb||^2`
//! * thermal reconstruction:  `L_th  = (1/|R|) sum ||C~_th - C_th||^2`
//! * cross-spectral term:     `L_reg = (1/|R|) sum (||C~_th - C_rgb||^2
//!                                               + ||C~_th - C_ev||^2)`
//!
//! Ground truths enter as constants: gradients flow only into the rendered
//! colors. The total is the weighted sum of enabled terms, accumulated over
//! the coarse and fine passes.

use serde::{Deserialize, Serialize};

use crate::diffmath::{BufId, ParameterStore, Tape};
use crate::error::{Error, Result};

/// Per-term weights and enables; a disabled term contributes exactly nothing
/// to the total or the gradients. Defaults to the unweighted three-term sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_rgb: f64,
    pub w_th: f64,
    pub w_reg: f64,
    pub enable_rgb: bool,
    pub enable_th: bool,
    pub enable_reg: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_rgb: 1.0,
            w_th: 1.0,
            w_reg: 1.0,
            enable_rgb: true,
            enable_th: true,
            enable_reg: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_rgb < 0.0 || self.w_th < 0.0 || self.w_reg < 0.0 {
            return Err(Error::Contract("loss weights must be non-negative".into()));
        }
        if !self.enable_rgb && !self.enable_th && !self.enable_reg {
            return Err(Error::Contract("at least one loss term must be enabled".into()));
        }
        Ok(())
    }
}

/// Which sensing modalities supervise a run. The mapping onto loss terms:
/// RGB enables the RGB reconstruction, thermal enables the thermal
/// reconstruction, and events enable the cross-spectral term (whose RGB
/// comparison is included only when RGB is also present).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySet {
    pub rgb: bool,
    pub thermal: bool,
    pub events: bool,
}

impl ModalitySet {
    pub fn all() -> Self {
        ModalitySet { rgb: true, thermal: true, events: true }
    }

    pub fn to_loss_weights(self) -> LossWeights {
        LossWeights {
            enable_rgb: self.rgb,
            enable_th: self.thermal,
            enable_reg: self.events,
            ..LossWeights::default()
        }
    }
}

/// The six ablation rows: name plus modality set.
pub fn ablation_configs() -> [(&'static str, ModalitySet); 6] {
    [
        ("rgb", ModalitySet { rgb: true, thermal: false, events: false }),
        ("rgb+events", ModalitySet { rgb: true, thermal: false, events: true }),
        ("rgb+thermal", ModalitySet { rgb: true, thermal: true, events: false }),
        ("thermal", ModalitySet { rgb: false, thermal: true, events: false }),
        ("thermal+events", ModalitySet { rgb: false, thermal: true, events: true }),
        ("all", ModalitySet::all()),
    ]
}

fn check_batch(tape: &Tape, rendered: BufId, truth: &[f64], what: &str) -> Result<()> {
    if tape.rows(rendered) == 0 {
        return Err(Error::Contract(format!("{what}: empty batch")));
    }
    if truth.len() != tape.rows(rendered) * tape.cols(rendered) {
        return Err(Error::Contract(format!(
            "{what}: truth holds {} values, rendering {}",
            truth.len(),
            tape.rows(rendered) * tape.cols(rendered)
        )));
    }
    Ok(())
}

/// RGB reconstruction loss (sum over channels, mean over rays).
pub fn loss_rgb(
    tape: &mut Tape,
    store: &ParameterStore,
    rendered: BufId,
    truth: &[f64],
) -> Result<BufId> {
    check_batch(tape, rendered, truth, "loss_rgb")?;
    tape.mse_rows(store, rendered, truth.to_vec())
}

/// Thermal reconstruction loss; identical form against the enhanced thermal
/// ground truth.
pub fn loss_thermal(
    tape: &mut Tape,
    store: &ParameterStore,
    rendered: BufId,
    truth: &[f64],
) -> Result<BufId> {
    check_batch(tape, rendered, truth, "loss_thermal")?;
    tape.mse_rows(store, rendered, truth.to_vec())
}

/// Cross-spectral regularization: pulls the thermal-branch rendering toward
/// the RGB and event ground truths. A missing modality drops its term with a
/// warning, or fails in strict mode; both missing is always an error.
pub fn loss_reg(
    tape: &mut Tape,
    store: &ParameterStore,
    rendered_th: BufId,
    truth_rgb: Option<&[f64]>,
    truth_ev: Option<&[f64]>,
    strict: bool,
) -> Result<BufId> {
    if truth_rgb.is_none() && truth_ev.is_none() {
        return Err(Error::Contract("loss_reg: no reference modality available".into()));
    }
    if strict && (truth_rgb.is_none() || truth_ev.is_none()) {
        return Err(Error::Contract("loss_reg: missing modality in strict mode".into()));
    }
    if truth_rgb.is_none() || truth_ev.is_none() {
        log::warn!("loss_reg: a reference modality is unavailable; term skipped");
    }
    let mut terms = Vec::new();
    for truth in [truth_rgb, truth_ev].into_iter().flatten() {
        check_batch(tape, rendered_th, truth, "loss_reg")?;
        terms.push(tape.mse_rows(store, rendered_th, truth.to_vec())?);
    }
    match terms.as_slice() {
        [one] => Ok(*one),
        [a, b] => tape.add(store, *a, *b),
        _ => unreachable!(),
    }
}

/// Scalar term buffers per modality; one entry per supervised pass
/// (coarse, fine).
#[derive(Debug, Default, Clone)]
pub struct LossTerms {
    pub rgb: Vec<BufId>,
    pub thermal: Vec<BufId>,
    pub reg: Vec<BufId>,
}

/// Value snapshot of the per-term losses, summed over passes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rgb: f64,
    pub thermal: f64,
    pub reg: f64,
    pub total: f64,
}

/// Weighted sum of the enabled terms over all supervised passes:
/// `w_rgb L_rgb + w_th L_th + w_reg L_reg`. Disabled terms are skipped
/// entirely, so they contribute neither value nor gradient.
pub fn total_loss(
    tape: &mut Tape,
    store: &ParameterStore,
    weights: &LossWeights,
    terms: &LossTerms,
) -> Result<(BufId, LossBreakdown)> {
    weights.validate()?;
    let mut breakdown = LossBreakdown::default();
    let mut total: Option<BufId> = None;
    let groups = [
        (weights.enable_rgb, weights.w_rgb, &terms.rgb, &mut breakdown.rgb),
        (weights.enable_th, weights.w_th, &terms.thermal, &mut breakdown.thermal),
        (weights.enable_reg, weights.w_reg, &terms.reg, &mut breakdown.reg),
    ];
    for (enabled, weight, bufs, slot) in groups {
        if !enabled || bufs.is_empty() {
            continue;
        }
        let mut acc = bufs[0];
        for &b in &bufs[1..] {
            acc = tape.add(store, acc, b)?;
        }
        *slot = tape.scalar(acc);
        let scaled = tape.scale(store, acc, weight)?;
        total = Some(match total {
            None => scaled,
            Some(t) => tape.add(store, t, scaled)?,
        });
    }
    let total = total
        .ok_or_else(|| Error::Contract("total_loss: no enabled term produced a value".into()))?;
    breakdown.total = tape.scalar(total);
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::gradcheck::{assert_grads_agree, central_diff_input, DEFAULT_STEP};

    fn tape_with(pred: &[f64], rows: usize) -> (ParameterStore, Tape, BufId) {
        let store = ParameterStore::new();
        let mut tape = Tape::new();
        let b = tape.input(pred.to_vec(), rows, 3).unwrap();
        (store, tape, b)
    }

    #[test]
    fn zero_residual_gives_zero() {
        let truth = vec![0.2, 0.4, 0.6, 0.8, 1.0, 0.0];
        let (store, mut tape, pred) = tape_with(&truth, 2);
        let l = loss_rgb(&mut tape, &store, pred, &truth).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn single_ray_residual_squares() {
        let (store, mut tape, pred) = tape_with(&[0.5, 0.0, 0.0], 1);
        let l = loss_rgb(&mut tape, &store, pred, &[0.0; 3]).unwrap();
        assert!((tape.scalar(l) - 0.25).abs() < 1e-15);

        let (store, mut tape, pred) = tape_with(&[0.0, 0.1, 0.0], 1);
        let l = loss_thermal(&mut tape, &store, pred, &[0.0; 3]).unwrap();
        assert!((tape.scalar(l) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn two_ray_mean() {
        let (store, mut tape, pred) = tape_with(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 2);
        let l = loss_rgb(&mut tape, &store, pred, &[0.0; 6]).unwrap();
        assert!((tape.scalar(l) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn duplicating_rays_is_invariant() {
        let pred = [0.3, 0.9, 0.1];
        let truth = [0.1, 0.5, 0.55];
        let (store, mut tape, b) = tape_with(&pred, 1);
        let l1 = loss_thermal(&mut tape, &store, b, &truth).unwrap();
        let doubled: Vec<f64> = pred.iter().chain(&pred).copied().collect();
        let truth2: Vec<f64> = truth.iter().chain(&truth).copied().collect();
        let (store2, mut tape2, b2) = tape_with(&doubled, 2);
        let l2 = loss_thermal(&mut tape2, &store2, b2, &truth2).unwrap();
        assert!((tape.scalar(l1) - tape2.scalar(l2)).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_rejected() {
        let store = ParameterStore::new();
        let mut tape = Tape::new();
        let pred = tape.input(vec![], 0, 3).unwrap();
        assert!(loss_rgb(&mut tape, &store, pred, &[]).is_err());
    }

    #[test]
    fn reg_loss_example_and_gradient() {
        let rendered = [0.5, 0.5, 0.5];
        let c_rgb = [0.5, 0.5, 0.5];
        let c_ev = [1.0, 0.5, 0.5];
        let (mut store, mut tape, pred) = tape_with(&rendered, 1);
        let l = loss_reg(&mut tape, &store, pred, Some(&c_rgb), Some(&c_ev), true).unwrap();
        assert!((tape.scalar(l) - 0.25).abs() < 1e-15);

        tape.backward(&mut store, l, &[1.0]).unwrap();
        let g = tape.input_grad(pred).unwrap();
        assert!((g[0] + 1.0).abs() < 1e-12, "{g:?}");
        assert!(g[1].abs() < 1e-12 && g[2].abs() < 1e-12);

        // against the finite-difference oracle
        let mut r = rendered.to_vec();
        let numeric: Vec<f64> = (0..3)
            .map(|i| {
                central_diff_input(&mut r, i, DEFAULT_STEP, |r| {
                    let (store, mut tape, pred) = tape_with(r, 1);
                    let l =
                        loss_reg(&mut tape, &store, pred, Some(&c_rgb), Some(&c_ev), true).unwrap();
                    tape.scalar(l)
                })
            })
            .collect();
        assert_grads_agree(g, &numeric, "loss_reg");
    }

    #[test]
    fn reg_loss_skips_missing_modality_unless_strict() {
        let (store, mut tape, pred) = tape_with(&[0.5, 0.5, 0.5], 1);
        let l = loss_reg(&mut tape, &store, pred, None, Some(&[1.0, 0.5, 0.5]), false).unwrap();
        assert!((tape.scalar(l) - 0.25).abs() < 1e-15);
        assert!(loss_reg(&mut tape, &store, pred, None, Some(&[1.0, 0.5, 0.5]), true).is_err());
        assert!(loss_reg(&mut tape, &store, pred, None, None, false).is_err());
    }

    fn terms_fixture(
        tape: &mut Tape,
        store: &ParameterStore,
        vals: [f64; 3],
    ) -> LossTerms {
        let mk = |tape: &mut Tape, v: f64| {
            let b = tape.input(vec![v.sqrt()], 1, 1).unwrap();
            // square it so the value is v and a gradient path exists
            tape.mul(store, b, b).unwrap()
        };
        LossTerms {
            rgb: vec![mk(tape, vals[0])],
            thermal: vec![mk(tape, vals[1])],
            reg: vec![mk(tape, vals[2])],
        }
    }

    #[test]
    fn total_is_weighted_sum() {
        let store = ParameterStore::new();
        let mut tape = Tape::new();
        let terms = terms_fixture(&mut tape, &store, [0.5, 0.25, 0.25]);
        let (total, breakdown) =
            total_loss(&mut tape, &store, &LossWeights::default(), &terms).unwrap();
        assert!((tape.scalar(total) - 1.0).abs() < 1e-12);
        assert!((breakdown.rgb - 0.5).abs() < 1e-12);
        assert!((breakdown.total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disabled_term_contributes_nothing() {
        let store = ParameterStore::new();
        let mut tape = Tape::new();
        let terms = terms_fixture(&mut tape, &store, [0.5, 0.25, 10.0]);
        let weights = LossWeights { enable_reg: false, ..LossWeights::default() };
        let (total, _) = total_loss(&mut tape, &store, &weights, &terms).unwrap();
        assert!((tape.scalar(total) - 0.75).abs() < 1e-12);

        // gradient into the disabled term's input is absent
        let mut store = store;
        tape.backward(&mut store, total, &[1.0]).unwrap();
        let reg_term = terms.reg[0];
        assert!(tape.input_grad(reg_term).is_none());
    }

    #[test]
    fn halving_weights_halves_total_and_gradients() {
        let run = |scale: f64| -> (f64, f64) {
            let mut store = ParameterStore::new();
            let mut tape = Tape::new();
            let x = tape.input(vec![0.7], 1, 1).unwrap();
            let sq = tape.mul(&store, x, x).unwrap();
            let terms =
                LossTerms { rgb: vec![sq], thermal: vec![], reg: vec![] };
            let weights = LossWeights {
                w_rgb: scale,
                enable_th: false,
                enable_reg: false,
                ..LossWeights::default()
            };
            let (total, _) = total_loss(&mut tape, &store, &weights, &terms).unwrap();
            tape.backward(&mut store, total, &[1.0]).unwrap();
            (tape.scalar(total), tape.input_grad(x).unwrap()[0])
        };
        let (v1, g1) = run(1.0);
        let (v2, g2) = run(0.5);
        assert!((v2 - v1 / 2.0).abs() < 1e-15);
        assert!((g2 - g1 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn all_disabled_is_an_error() {
        let store = ParameterStore::new();
        let mut tape = Tape::new();
        let terms = terms_fixture(&mut tape, &store, [0.1, 0.1, 0.1]);
        let weights = LossWeights {
            enable_rgb: false,
            enable_th: false,
            enable_reg: false,
            ..LossWeights::default()
        };
        assert!(total_loss(&mut tape, &store, &weights, &terms).is_err());
    }

    #[test]
    fn ablation_table_flag_mapping() {
        let configs = ablation_configs();
        assert_eq!(configs.len(), 6);
        let by_name: std::collections::HashMap<_, _> = configs.into_iter().collect();
        let rgb_only = by_name["rgb"].to_loss_weights();
        assert!(rgb_only.enable_rgb && !rgb_only.enable_th && !rgb_only.enable_reg);
        let all = by_name["all"].to_loss_weights();
        assert!(all.enable_rgb && all.enable_th && all.enable_reg);
        let th_ev = by_name["thermal+events"].to_loss_weights();
        assert!(!th_ev.enable_rgb && th_ev.enable_th && th_ev.enable_reg);
    }
}
