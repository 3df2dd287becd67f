//! Loss stack: in-batch contrastive ranking loss, the KL alignment term
//! between query- and description-induced ranking distributions, and their
//! λ-weighted sum, each with exact gradients w.r.t. the embeddings.
//!
//! For a batch of `B` rows, row `i` holds query `q_i`, its positive document
//! `d_i` and optionally a description `t_i`. All `B` documents form the
//! candidate set of every row, so each query sees `B - 1` negatives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mathkernel::{axpy, dot, log_softmax, softmax, ProbabilityVector, Vector};
use crate::scalar::Scalar;

/// Unit-norm tolerance for embeddings handed to the objective.
const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct BatchScores<T> {
    query_embeddings: Vec<Vector<T>>,
    description_embeddings: Vec<Option<Vector<T>>>,
    document_embeddings: Vec<Vector<T>>,
    temperature: T,
}

fn check_unit<T: Scalar>(v: &Vector<T>, dim: usize) -> Result<()> {
    if v.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: v.dim(),
        });
    }
    let tol = T::of(UNIT_TOLERANCE).max(T::epsilon() * T::of(64.0));
    if (v.norm() - T::one()).abs() > tol {
        return Err(Error::invalid(format!(
            "embedding is not unit-norm (‖v‖ = {})",
            v.norm()
        )));
    }
    Ok(())
}

impl<T: Scalar> BatchScores<T> {
    pub fn new(
        query_embeddings: Vec<Vector<T>>,
        description_embeddings: Vec<Option<Vector<T>>>,
        document_embeddings: Vec<Vector<T>>,
        temperature: T,
    ) -> Result<Self> {
        let b = query_embeddings.len();
        if b < 2 {
            return Err(Error::invalid("a batch needs at least two rows"));
        }
        for len in [description_embeddings.len(), document_embeddings.len()] {
            if len != b {
                return Err(Error::DimensionMismatch {
                    expected: b,
                    actual: len,
                });
            }
        }
        if !(temperature > T::zero()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        let dim = query_embeddings[0].dim();
        for v in query_embeddings
            .iter()
            .chain(&document_embeddings)
            .chain(description_embeddings.iter().flatten())
        {
            check_unit(v, dim)?;
        }
        Ok(Self {
            query_embeddings,
            description_embeddings,
            document_embeddings,
            temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.query_embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.query_embeddings.is_empty()
    }

    pub fn temperature(&self) -> T {
        self.temperature
    }

    fn views(&self) -> BatchView<'_, T> {
        BatchView {
            queries: self.query_embeddings.iter().map(|v| &v[..]).collect(),
            descriptions: self
                .description_embeddings
                .iter()
                .map(|o| o.as_ref().map(|v| &v[..]))
                .collect(),
            documents: self.document_embeddings.iter().map(|v| &v[..]).collect(),
            temperature: self.temperature,
        }
    }
}

/// Borrowed, unvalidated batch used by the loss kernels.
#[derive(Debug, Clone)]
pub(crate) struct BatchView<'a, T> {
    pub queries: Vec<&'a [T]>,
    pub descriptions: Vec<Option<&'a [T]>>,
    pub documents: Vec<&'a [T]>,
    pub temperature: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub contrastive: T,
    pub kl: T,
    pub total: T,
    pub lambda: T,
    /// Rows without a description (excluded from the KL mean).
    pub kl_mask_count: usize,
}

/// `∂L/∂e` for every embedding in the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients<T> {
    pub queries: Vec<Vec<T>>,
    pub descriptions: Vec<Option<Vec<T>>>,
    pub documents: Vec<Vec<T>>,
}

impl<T: Scalar> BatchGradients<T> {
    fn zeros(view: &BatchView<'_, T>) -> Self {
        let dim = view.queries.first().map_or(0, |q| q.len());
        Self {
            queries: vec![vec![T::zero(); dim]; view.queries.len()],
            descriptions: view
                .descriptions
                .iter()
                .map(|d| d.map(|_| vec![T::zero(); dim]))
                .collect(),
            documents: vec![vec![T::zero(); dim]; view.documents.len()],
        }
    }
}

/// `f(q, d)`: cosine of unit vectors, i.e. their dot product.
pub fn relevance_score<T: Scalar>(query: &[T], document: &[T]) -> Result<T> {
    if query.len() != document.len() {
        return Err(Error::DimensionMismatch {
            expected: query.len(),
            actual: document.len(),
        });
    }
    Ok(dot(query, document))
}

/// Softmax over `f(anchor, d) / τ` for each candidate `d`.
pub fn ranking_distribution<T: Scalar, V: AsRef<[T]>>(
    anchor: &[T],
    candidates: &[V],
    temperature: T,
) -> Result<ProbabilityVector<T>> {
    if candidates.len() < 2 {
        return Err(Error::invalid("ranking needs at least two candidates"));
    }
    let scores = candidates
        .iter()
        .map(|c| relevance_score(anchor, c.as_ref()))
        .collect::<Result<Vec<T>>>()?;
    softmax(&scores, temperature)
}

fn score_rows<T: Scalar>(anchors: &[&[T]], documents: &[&[T]]) -> Vec<Vec<T>> {
    anchors
        .iter()
        .map(|a| documents.iter().map(|d| dot(a, d)).collect())
        .collect()
}

/// Scatter score gradients `G[i][j] = ∂L/∂s(a_i, d_j)` into embeddings.
fn scatter<T: Scalar>(
    g_scores: &[T],
    anchor: &[T],
    documents: &[&[T]],
    g_anchor: &mut [T],
    g_docs: &mut [Vec<T>],
) {
    for (j, &g) in g_scores.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        axpy(g, documents[j], g_anchor);
        axpy(g, anchor, &mut g_docs[j]);
    }
}

struct Terms<T> {
    contrastive: T,
    kl: T,
    kl_mask_count: usize,
    contrastive_grads: BatchGradients<T>,
    kl_grads: BatchGradients<T>,
}

fn compute_terms<T: Scalar>(view: &BatchView<'_, T>, teacher_detached: bool) -> Result<Terms<T>> {
    let b = view.queries.len();
    let tau = view.temperature;
    let inv_b = T::one() / T::of_usize(b);

    let q_scores = score_rows(&view.queries, &view.documents);
    let log_p: Vec<Vec<T>> = q_scores
        .iter()
        .map(|s| log_softmax(s, tau))
        .collect::<Result<_>>()?;

    let mut contrastive = T::zero();
    let mut cg = BatchGradients::zeros(view);
    for i in 0..b {
        contrastive -= log_p[i][i];
        let g_row: Vec<T> = (0..b)
            .map(|j| {
                let delta = if i == j { T::one() } else { T::zero() };
                (log_p[i][j].exp() - delta) * inv_b / tau
            })
            .collect();
        scatter(&g_row, view.queries[i], &view.documents, &mut cg.queries[i], &mut cg.documents);
    }
    contrastive *= inv_b;

    let unmasked: Vec<usize> = (0..b).filter(|&i| view.descriptions[i].is_some()).collect();
    let kl_mask_count = b - unmasked.len();
    let mut kg = BatchGradients::zeros(view);
    let mut kl = T::zero();
    if !unmasked.is_empty() {
        let inv_m = T::one() / T::of_usize(unmasked.len());
        for &i in &unmasked {
            let t = view.descriptions[i].expect("unmasked row has a description");
            let t_scores: Vec<T> = view.documents.iter().map(|d| dot(t, d)).collect();
            let log_q = log_softmax(&t_scores, tau)?;
            let mut kl_i = T::zero();
            for j in 0..b {
                let p = log_p[i][j].exp();
                if p > T::zero() {
                    kl_i += p * (log_p[i][j] - log_q[j]);
                }
            }
            kl += kl_i;

            // ∂KL_i/∂u_j = q_j - p_j  (student side)
            let g_t: Vec<T> = (0..b)
                .map(|j| (log_q[j].exp() - log_p[i][j].exp()) * inv_m / tau)
                .collect();
            let mut g_t_emb = vec![T::zero(); t.len()];
            scatter(&g_t, t, &view.documents, &mut g_t_emb, &mut kg.documents);
            kg.descriptions[i] = Some(g_t_emb);

            if !teacher_detached {
                // ∂KL_i/∂s_j = p_j (ln p_j - ln q_j - KL_i)  (teacher side)
                let g_s: Vec<T> = (0..b)
                    .map(|j| {
                        let p = log_p[i][j].exp();
                        p * (log_p[i][j] - log_q[j] - kl_i) * inv_m / tau
                    })
                    .collect();
                scatter(&g_s, view.queries[i], &view.documents, &mut kg.queries[i], &mut kg.documents);
            }
        }
        kl *= inv_m;
    }
    Ok(Terms {
        contrastive,
        kl: kl.max(T::zero()),
        kl_mask_count,
        contrastive_grads: cg,
        kl_grads: kg,
    })
}

pub(crate) fn total_loss_view<T: Scalar>(
    view: &BatchView<'_, T>,
    lambda: T,
    teacher_detached: bool,
) -> Result<(LossBreakdown<T>, BatchGradients<T>)> {
    if !(lambda >= T::zero()) {
        return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    let terms = compute_terms(view, teacher_detached)?;
    let mut grads = terms.contrastive_grads;
    let kg = terms.kl_grads;
    for (g, k) in grads.queries.iter_mut().zip(&kg.queries) {
        axpy(lambda, k, g);
    }
    for (g, k) in grads.documents.iter_mut().zip(&kg.documents) {
        axpy(lambda, k, g);
    }
    for (g, k) in grads.descriptions.iter_mut().zip(kg.descriptions) {
        *g = k.map(|mut v| {
            v.iter_mut().for_each(|x| *x *= lambda);
            v
        });
    }
    let breakdown = LossBreakdown {
        contrastive: terms.contrastive,
        kl: terms.kl,
        total: terms.contrastive + lambda * terms.kl,
        lambda,
        kl_mask_count: terms.kl_mask_count,
    };
    Ok((breakdown, grads))
}

/// Mean in-batch contrastive loss `-(1/B) Σ_i ln P(d_i | q_i, D̃)`.
pub fn contrastive_loss<T: Scalar>(batch: &BatchScores<T>) -> Result<(T, BatchGradients<T>)> {
    let terms = compute_terms(&batch.views(), true)?;
    Ok((terms.contrastive, terms.contrastive_grads))
}

/// Mean over described rows of `KL(P(·|q_i) ‖ P(·|t_i))`.
///
/// Returns the loss, the number of masked rows and the gradients.
pub fn kl_alignment_loss<T: Scalar>(
    batch: &BatchScores<T>,
    teacher_detached: bool,
) -> Result<(T, usize, BatchGradients<T>)> {
    let terms = compute_terms(&batch.views(), teacher_detached)?;
    Ok((terms.kl, terms.kl_mask_count, terms.kl_grads))
}

/// `L = L_contrast + λ · L_KL`.
pub fn total_loss<T: Scalar>(
    batch: &BatchScores<T>,
    lambda: T,
    teacher_detached: bool,
) -> Result<(LossBreakdown<T>, BatchGradients<T>)> {
    total_loss_view(&batch.views(), lambda, teacher_detached)
}
