//! CTC loss, greedy decoding and character error rate.
//!
//! The loss is the forward (alpha) recursion over the blank-extended label
//! sequence, written in log space with graph operations only; its gradient
//! comes from the autodiff engine.

use thiserror::Error;

use crate::autodiff::{Array, Graph, GraphError, Var};

pub const BLANK: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
/// Ids below this are reserved.
pub const FIRST_CHAR_ID: usize = 3;

/// Stand-in for log(0) that keeps every array entry finite.
const LOG_ZERO: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CtcError {
    #[error("{frames} frames cannot emit this target; at least {required} are needed")]
    Infeasible { frames: usize, required: usize },
    #[error("target contains the blank id at position {0}")]
    BlankInTarget(usize),
    #[error("token id {id} outside a vocabulary of {vocab}")]
    OutOfVocabulary { id: usize, vocab: usize },
    #[error("reference sequence is empty")]
    EmptyReference,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, CtcError>;

/// Token ids; `BLANK`, `CLS` and `SEP` are reserved.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Minimum frame count for a target: one per label plus a separating
/// blank between each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

fn check_target(target: &[usize], frames: usize, vocab: usize) -> Result<()> {
    if let Some(pos) = target.iter().position(|&t| t == BLANK) {
        return Err(CtcError::BlankInTarget(pos));
    }
    if let Some(&id) = target.iter().find(|&&t| t >= vocab) {
        return Err(CtcError::OutOfVocabulary { id, vocab });
    }
    let required = min_frames(target);
    if frames < required {
        return Err(CtcError::Infeasible { frames, required });
    }
    Ok(())
}

/// Negative log-likelihood of `target` under the T x V log-probability
/// grid `log_probs`, summed over all alignments.
pub fn ctc_loss(g: &Graph, log_probs: Var, target: &[usize]) -> Result<Var> {
    let (frames, vocab) = g.shape(log_probs);
    check_target(target, frames, vocab)?;

    let mut extended = Vec::with_capacity(2 * target.len() + 1);
    extended.push(BLANK);
    for &t in target {
        extended.push(t);
        extended.push(BLANK);
    }
    let states = extended.len();

    // Skip transitions s-2 -> s are only allowed onto a label that differs
    // from the label two states back.
    let skip_mask = Array::from_shape_fn((1, states), |(_, s)| {
        if s >= 2 && extended[s] != BLANK && extended[s] != extended[s - 2] {
            0.0
        } else {
            LOG_ZERO
        }
    });
    let skip_mask = g.constant(skip_mask);
    let start_mask = g.constant(Array::from_shape_fn((1, states), |(_, s)| {
        if s < 2 {
            0.0
        } else {
            LOG_ZERO
        }
    }));

    let emissions = g.gather_cols(log_probs, &extended)?;
    let mut alpha = g.add(g.row_slice(emissions, 0, 1)?, start_mask)?;
    for t in 1..frames {
        let stay_or_step = g.log_add_exp(alpha, g.shift_cols(alpha, 1, LOG_ZERO))?;
        let skip = g.add(g.shift_cols(alpha, 2, LOG_ZERO), skip_mask)?;
        let reach = g.log_add_exp(stay_or_step, skip)?;
        alpha = g.add(reach, g.row_slice(emissions, t, 1)?)?;
    }

    let last = g.gather_cols(alpha, &[states - 1])?;
    let total = if states > 1 {
        g.log_add_exp(last, g.gather_cols(alpha, &[states - 2])?)?
    } else {
        last
    };
    Ok(g.scale(total, -1.0))
}

/// [`ctc_loss`] on plain values.
pub fn ctc_loss_value(log_probs: &Array, target: &[usize]) -> Result<f64> {
    let g = Graph::new();
    let lp = g.constant(log_probs.clone());
    let loss = ctc_loss(&g, lp, target)?;
    Ok(g.scalar(loss))
}

/// Best path: per-frame argmax, merge repeats, drop blanks.
pub fn greedy_decode(log_probs: &Array) -> TokenSequence {
    let mut out = Vec::new();
    let mut previous = None;
    for row in log_probs.rows() {
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        if Some(best) != previous && best != BLANK {
            out.push(best);
        }
        previous = Some(best);
    }
    TokenSequence(out)
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=reference.len()).collect();
    for (i, h) in hyp.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let above = row[j + 1];
            let sub = diag + usize::from(h != r);
            row[j + 1] = sub.min(above + 1).min(row[j] + 1);
            diag = above;
        }
    }
    row[reference.len()]
}

/// Edit distance divided by reference length.
pub fn cer(hyp: &TokenSequence, reference: &TokenSequence) -> Result<f64> {
    if reference.is_empty() {
        return Err(CtcError::EmptyReference);
    }
    Ok(edit_distance(hyp.ids(), reference.ids()) as f64 / reference.len() as f64)
}
