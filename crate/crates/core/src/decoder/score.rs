//! `Sim_R = gamma - Dist`, `Sim_Θ = mean(h_q ⊙ θ_a)` and their product.

use std::rc::Rc;

use ndarray::ArrayView1;

use super::{Decoder, RelationState, StateVars};
use crate::error::{Error, Result};
use crate::nn::{Mat, Tape, Var};

/// L1 distance to a point, or for a box
/// `sum relu(|p - c| - o) + alpha * sum min(|p - c|, o)`.
pub fn relation_distance(
    center: ArrayView1<f64>,
    offset: Option<ArrayView1<f64>>,
    point: ArrayView1<f64>,
    alpha: f64,
) -> f64 {
    match offset {
        None => center
            .iter()
            .zip(point.iter())
            .map(|(c, p)| (p - c).abs())
            .sum(),
        Some(o) => {
            let mut outside = 0.0;
            let mut inside = 0.0;
            for ((c, p), o) in center.iter().zip(point.iter()).zip(o.iter()) {
                let delta = (p - c).abs();
                outside += (delta - o).max(0.0);
                inside += delta.min(*o);
            }
            outside + alpha * inside
        }
    }
}

pub fn score_relation(
    state: &RelationState,
    point: ArrayView1<f64>,
    gamma: f64,
    alpha: f64,
) -> Result<f64> {
    let d = state.center.len();
    if point.len() != d || state.offset.as_ref().is_some_and(|o| o.len() != d) {
        return Err(Error::Shape(format!(
            "query state has dimension {d}, candidate {}",
            point.len()
        )));
    }
    let offset = state.offset.as_ref().map(|o| o.view());
    Ok(gamma - relation_distance(state.center.view(), offset, point, alpha))
}

pub fn score_view(query: ArrayView1<f64>, candidate: ArrayView1<f64>) -> Result<f64> {
    if query.len() != candidate.len() || query.is_empty() {
        return Err(Error::Shape(format!(
            "view states have dimensions {} and {}",
            query.len(),
            candidate.len()
        )));
    }
    Ok(query.dot(&candidate) / query.len() as f64)
}

/// Scores of every candidate entity for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScores {
    pub sim_r: Vec<f64>,
    /// All ones when the view decoder is disabled.
    pub sim_theta: Vec<f64>,
    pub sim: Vec<f64>,
}

/// Scores all rows of `points` and `theta` against one decoded query.
pub fn score_all(
    decoder: &Decoder,
    center: ArrayView1<f64>,
    offset: Option<ArrayView1<f64>>,
    view: Option<ArrayView1<f64>>,
    points: &Mat,
    theta: &Mat,
) -> CandidateScores {
    let n = points.nrows();
    let cfg = decoder.config;
    let mut out = CandidateScores {
        sim_r: Vec::with_capacity(n),
        sim_theta: Vec::with_capacity(n),
        sim: Vec::with_capacity(n),
    };
    let d = center.len() as f64;
    for (p, t) in points.rows().into_iter().zip(theta.rows()) {
        let sim_r = cfg.gamma - relation_distance(center, offset, p, cfg.alpha);
        let sim_theta = match view {
            Some(w) if cfg.view_decoder => w.dot(&t) / d,
            _ => 1.0,
        };
        out.sim_r.push(sim_r);
        out.sim_theta.push(sim_theta);
        out.sim.push(sim_r * sim_theta);
    }
    out
}

/// Scores on a tape, one row per (query, candidate) pair.
#[derive(Debug, Clone, Copy)]
pub struct ScoreVars {
    pub sim_r: Var,
    pub sim_theta: Option<Var>,
    pub sim: Var,
}

impl Decoder {
    /// `candidates[i]` are entity indexes scored against row `i` of `state`.
    /// Rows are laid out query-major.
    pub fn score_batch(
        &self,
        tape: &mut Tape,
        points: Var,
        theta: Var,
        state: StateVars,
        candidates: &[Vec<usize>],
    ) -> ScoreVars {
        let repeat: Vec<usize> = candidates
            .iter()
            .enumerate()
            .flat_map(|(i, c)| std::iter::repeat(i).take(c.len()))
            .collect();
        let repeat = Rc::new(repeat);
        let flat = Rc::new(candidates.iter().flatten().copied().collect::<Vec<_>>());

        let dist = tape.pair_distance(
            points,
            state.center,
            state.offset,
            flat.clone(),
            repeat.clone(),
            self.config.alpha,
        );
        let sim_r = tape.affine(dist, -1.0, self.config.gamma);
        let sim_theta = state
            .view
            .filter(|_| self.config.view_decoder)
            .map(|w| tape.pair_dot(w, theta, repeat, flat, 1.0 / self.d as f64));
        let sim = match sim_theta {
            Some(st) => tape.mul(sim_r, st),
            None => sim_r,
        };
        ScoreVars {
            sim_r,
            sim_theta,
            sim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn box_distance_hand_case() {
        let dist = relation_distance(
            array![0.0, 0.0].view(),
            Some(array![1.0, 1.0].view()),
            array![2.0, 0.0].view(),
            0.5,
        );
        assert_eq!(dist, 1.5);
        let state = RelationState {
            center: array![0.0, 0.0],
            offset: Some(array![1.0, 1.0]),
        };
        assert_eq!(score_relation(&state, array![2.0, 0.0].view(), 12.0, 0.5).unwrap(), 10.5);
    }

    #[test]
    fn zero_distance_scores_gamma() {
        let state = RelationState {
            center: array![0.3, -1.0],
            offset: None,
        };
        assert_eq!(score_relation(&state, array![0.3, -1.0].view(), 12.0, 0.2).unwrap(), 12.0);
        let boxed = RelationState {
            offset: Some(array![0.5, 0.5]),
            ..state
        };
        assert_eq!(score_relation(&boxed, array![0.3, -1.0].view(), 12.0, 0.2).unwrap(), 12.0);
        assert!(score_relation(&boxed, array![0.0].view(), 12.0, 0.2).is_err());
    }

    #[test]
    fn view_score_cases() {
        assert_eq!(score_view(array![1.0, 2.0].view(), array![0.0, 0.0].view()).unwrap(), 0.0);
        let ones = ndarray::Array1::from_elem(4, 1.0);
        assert_eq!(score_view(ones.view(), ones.view()).unwrap(), 1.0);
        assert!(score_view(ones.view(), array![1.0].view()).is_err());
    }
}
