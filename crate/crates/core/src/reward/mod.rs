//! Three-component edit rewards and the external scorer protocol.
//!
//! Every component lies in `[0, 5]`; the training reward is their sum.

pub mod remote;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::task::{
    dist_sq, instructed_center, manifold_distance, preserved_deviation_sq, EditInstance,
};

pub const MAX_COMPONENT: f64 = 5.0;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("{field} = {value} is outside [0, 5]")]
    OutOfRange { field: &'static str, value: f64 },
    #[error("malformed scorer response: {0}")]
    Malformed(String),
    #[error("scorer timed out after {attempts} attempts")]
    Timeout { attempts: usize },
    #[error("scorer connection failed: {0}")]
    Connect(std::io::Error),
    #[error("scorer io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardScore {
    pub alignment: f64,
    pub coherence: f64,
    pub consistency: f64,
}

fn check(field: &'static str, value: f64) -> Result<f64, RewardError> {
    if (0.0..=MAX_COMPONENT).contains(&value) {
        Ok(value)
    } else {
        Err(RewardError::OutOfRange { field, value })
    }
}

impl RewardScore {
    pub fn new(alignment: f64, coherence: f64, consistency: f64) -> Result<Self, RewardError> {
        Ok(Self {
            alignment: check("alignment", alignment)?,
            coherence: check("coherence", coherence)?,
            consistency: check("consistency", consistency)?,
        })
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        Self::new(self.alignment, self.coherence, self.consistency).map(|_| ())
    }

    pub fn total(&self) -> f64 {
        self.alignment + self.coherence + self.consistency
    }
}

fn component(sq_distance: f64) -> f64 {
    (MAX_COMPONENT * (-sq_distance).exp()).clamp(0.0, MAX_COMPONENT)
}

/// Closed-form score of an edited point.
///
/// * alignment: closeness to where the instruction sends the point
/// * coherence: closeness to the nearest mode of the edited distribution
/// * consistency: preservation of the attributes the edit must not change
pub fn analytic_score(x0: [f64; 2], inst: &EditInstance) -> RewardScore {
    let ins = &inst.instruction;
    let centre = instructed_center(ins, inst.source);
    let d = manifold_distance(ins, x0);
    RewardScore {
        alignment: component(dist_sq(x0, centre)),
        coherence: component(d * d),
        consistency: component(preserved_deviation_sq(ins, inst.source, x0)),
    }
}

/// Anything that can score an edited point.
pub trait Scorer: Send {
    fn score(&mut self, x0: [f64; 2], inst: &EditInstance) -> Result<RewardScore, RewardError>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct AnalyticScorer;

impl Scorer for AnalyticScorer {
    fn score(&mut self, x0: [f64; 2], inst: &EditInstance) -> Result<RewardScore, RewardError> {
        Ok(analytic_score(x0, inst))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::task::{Instruction, Task, MODE_CENTERS};
    use proptest::prelude::*;

    fn move_instance(source: [f64; 2], code: usize) -> EditInstance {
        EditInstance::new(source, Instruction::new(Task::MoveToMode, code).unwrap())
    }

    #[test]
    fn perfect_edit_scores_fifteen() {
        // Source sits exactly on a mode, so the target is the instructed centre.
        let inst = move_instance(MODE_CENTERS[2], 0);
        let s = analytic_score(MODE_CENTERS[0], &inst);
        assert_eq!(s, RewardScore::new(5.0, 5.0, 5.0).unwrap());
        assert_eq!(s.total(), 15.0);
    }

    #[test]
    fn components_match_direct_formula() {
        let inst = move_instance([-1.8, -2.3], 0);
        let x0 = [2.4, 1.7];
        let s = analytic_score(x0, &inst);
        let align = 5.0 * (-((2.4f64 - 2.0).powi(2) + (1.7f64 - 2.0).powi(2))).exp();
        let coher = align;
        let off_src: [f64; 2] = [-1.8 + 2.0, -2.3 + 2.0];
        let off_out: [f64; 2] = [0.4, -0.3];
        let cons = 5.0 * (-((off_src[0] - off_out[0]).powi(2) + (off_src[1] - off_out[1]).powi(2))).exp();
        assert!((s.alignment - align).abs() < 1e-12);
        assert!((s.coherence - coher).abs() < 1e-12);
        assert!((s.consistency - cons).abs() < 1e-12);
    }

    #[test]
    fn reflection_rewards_preserve_the_other_axis() {
        let inst = EditInstance::new([1.0, 2.0], Instruction::new(Task::ReflectAxis, 0).unwrap());
        let exact = analytic_score([1.0, -2.0], &inst);
        assert_eq!(exact.alignment, 5.0);
        assert_eq!(exact.consistency, 5.0);
        assert!(analytic_score([1.5, -2.0], &inst).consistency < 5.0);
    }

    #[test]
    fn out_of_range_components_are_rejected() {
        assert!(matches!(
            RewardScore::new(7.0, 1.0, 1.0),
            Err(RewardError::OutOfRange { field: "alignment", .. })
        ));
        assert!(RewardScore::new(1.0, -0.1, 1.0).is_err());
        assert!(RewardScore::new(1.0, 1.0, f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn components_decrease_with_distance(dx in -1.0f64..1.0, dy in -1.0f64..1.0, k in 1.05f64..3.0) {
            prop_assume!(dx.abs() + dy.abs() > 1e-3);
            let inst = move_instance(MODE_CENTERS[1], 3);
            let c = MODE_CENTERS[3];
            let near = analytic_score([c[0] + dx, c[1] + dy], &inst);
            let far = analytic_score([c[0] + k * dx, c[1] + k * dy], &inst);
            prop_assert!(far.alignment < near.alignment);
            prop_assert!(far.consistency < near.consistency);
        }

        #[test]
        fn totals_stay_in_range(x in -10.0f64..10.0, y in -10.0f64..10.0, code in 0usize..4) {
            let inst = move_instance([0.3, -2.1], code);
            let s = analytic_score([x, y], &inst);
            prop_assert!(s.validate().is_ok());
            prop_assert!((0.0..=15.0).contains(&s.total()));
        }
    }
}
