//! Toy dual encoder with attention pooling over document patches.
//!
//! Document path, per patch `p` with tokens `τ_p`:
//!
//! ```text
//! x_p = mean(T[τ_p]) + P[p]
//! h_p = x_p · W_patch
//! α   = softmax(h_p · u)
//! z   = Σ_p α_p h_p
//! y   = z · W_out,  e = y / ‖y‖
//! ```
//!
//! Text path (queries and descriptions): `x = mean(T[τ])`, `y = x · W_out`,
//! `e = y / ‖y‖`. Both paths share the token table and output head.
//!
//! Backward is written out by hand. Per-item gradients are computed
//! independently (and may run in parallel); the reduction into the shared
//! gradient buffer is serial in item order, so results do not depend on the
//! thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticDocument;
use crate::error::{Error, Result};
use crate::mathkernel::{axpy, dot, norm, softmax, Matrix, ProbabilityVector, Vector};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_embed: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl EncoderDims {
    pub fn patch_count(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.d_embed == 0
            || self.grid_rows == 0
            || self.grid_cols == 0
        {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        Ok(())
    }
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            d_embed: 32,
            grid_rows: 12,
            grid_cols: 12,
        }
    }
}

/// Encoder weights. The same layout doubles as the gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams<T> {
    pub token_table: Matrix<T>,
    pub patch_projection: Matrix<T>,
    pub position_table: Matrix<T>,
    pub attention_query: Vec<T>,
    pub output_projection: Matrix<T>,
}

pub const TENSOR_NAMES: [&str; 5] = [
    "token_table",
    "patch_projection",
    "position_table",
    "attention_query",
    "output_projection",
];

impl<T: Scalar> EncoderParams<T> {
    pub fn zeros(dims: &EncoderDims) -> Self {
        Self {
            token_table: Matrix::zeros(dims.vocab_size, dims.d_model),
            patch_projection: Matrix::zeros(dims.d_model, dims.d_model),
            position_table: Matrix::zeros(dims.patch_count(), dims.d_model),
            attention_query: vec![T::zero(); dims.d_model],
            output_projection: Matrix::zeros(dims.d_model, dims.d_embed),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            token_table: Matrix::zeros(self.token_table.rows(), self.token_table.cols()),
            patch_projection: Matrix::zeros(self.patch_projection.rows(), self.patch_projection.cols()),
            position_table: Matrix::zeros(self.position_table.rows(), self.position_table.cols()),
            attention_query: vec![T::zero(); self.attention_query.len()],
            output_projection: Matrix::zeros(
                self.output_projection.rows(),
                self.output_projection.cols(),
            ),
        }
    }

    pub fn patch_count(&self) -> usize {
        self.position_table.rows()
    }

    pub fn check_consistent(&self) -> Result<()> {
        let dm = self.token_table.cols();
        let checks = [
            (self.patch_projection.rows(), dm),
            (self.patch_projection.cols(), dm),
            (self.position_table.cols(), dm),
            (self.attention_query.len(), dm),
            (self.output_projection.rows(), dm),
        ];
        for (actual, expected) in checks {
            if actual != expected {
                return Err(Error::DimensionMismatch { expected, actual });
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&[T]; 5] {
        [
            self.token_table.as_slice(),
            self.patch_projection.as_slice(),
            self.position_table.as_slice(),
            &self.attention_query,
            self.output_projection.as_slice(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 5] {
        [
            self.token_table.as_mut_slice(),
            self.patch_projection.as_mut_slice(),
            self.position_table.as_mut_slice(),
            &mut self.attention_query,
            self.output_projection.as_mut_slice(),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn add_scaled(&mut self, alpha: T, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(alpha, src, dst);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Flat view of entry `i` across all tensors, in [`TENSOR_NAMES`] order.
    pub fn get_flat(&self, mut i: usize) -> T {
        for t in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn set_flat(&mut self, mut i: usize, v: T) {
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = v;
                return;
            }
            i -= t.len();
        }
        panic!("flat parameter index out of range");
    }
}

/// Draws every entry i.i.d. from `U[-1/√d_model, 1/√d_model]`.
pub fn init_params<T: Scalar>(dims: &EncoderDims, seed: u64) -> Result<EncoderParams<T>> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (dims.d_model as f64).sqrt();
    let mut params = EncoderParams::zeros(dims);
    for t in params.tensors_mut() {
        for x in t.iter_mut() {
            *x = T::of(rng.gen_range(-bound..=bound));
        }
    }
    Ok(params)
}

#[derive(Debug, Clone)]
pub struct DocumentCache<T> {
    patch_tokens: Vec<Vec<u32>>,
    inputs: Matrix<T>,
    hidden: Matrix<T>,
    attention: Vec<T>,
    pooled: Vec<T>,
    norm: T,
    embedding: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct TextCache<T> {
    tokens: Vec<u32>,
    mean: Vec<T>,
    norm: T,
    embedding: Vec<T>,
}

#[derive(Debug, Clone)]
pub enum ForwardCache<T> {
    Document(DocumentCache<T>),
    Text(TextCache<T>),
}

impl<T: Scalar> ForwardCache<T> {
    pub fn embedding(&self) -> &[T] {
        match self {
            ForwardCache::Document(c) => &c.embedding,
            ForwardCache::Text(c) => &c.embedding,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncodeOutput<T> {
    pub embedding: Vector<T>,
    pub attention_weights: Option<ProbabilityVector<T>>,
    pub cache: ForwardCache<T>,
}

fn check_token(id: u32, vocab: usize) -> Result<()> {
    if (id as usize) < vocab {
        Ok(())
    } else {
        Err(Error::TokenOutOfRange { id, vocab })
    }
}

fn normalize<T: Scalar>(y: &[T]) -> Result<(T, Vec<T>)> {
    let n = norm(y);
    if !(n > T::zero()) || !n.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok((n, y.iter().map(|&v| v / n).collect()))
}

/// Encodes a patch grid given as per-patch token lists.
pub fn encode_patches<T: Scalar>(
    patch_tokens: &[Vec<u32>],
    params: &EncoderParams<T>,
) -> Result<EncodeOutput<T>> {
    let n = params.patch_count();
    if patch_tokens.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: patch_tokens.len(),
        });
    }
    let vocab = params.token_table.rows();
    let dm = params.token_table.cols();
    let mut inputs = Matrix::zeros(n, dm);
    let mut hidden = Matrix::zeros(n, dm);
    let mut logits = vec![T::zero(); n];
    for (p, toks) in patch_tokens.iter().enumerate() {
        if toks.is_empty() {
            return Err(Error::Empty("patch tokens"));
        }
        let inv = T::one() / T::of_usize(toks.len());
        let x = inputs.row_mut(p);
        for &t in toks {
            check_token(t, vocab)?;
            axpy(inv, params.token_table.row(t as usize), x);
        }
        axpy(T::one(), params.position_table.row(p), x);
        let x = inputs.row(p).to_vec();
        params.patch_projection.left_mul(&x, hidden.row_mut(p));
        logits[p] = dot(hidden.row(p), &params.attention_query);
    }
    let attention = softmax(&logits, T::one())?;
    let mut pooled = vec![T::zero(); dm];
    for p in 0..n {
        axpy(attention[p], hidden.row(p), &mut pooled);
    }
    let mut y = vec![T::zero(); params.output_projection.cols()];
    params.output_projection.left_mul(&pooled, &mut y);
    let (nrm, e) = normalize(&y)?;
    Ok(EncodeOutput {
        embedding: Vector::new(e.clone())?,
        attention_weights: Some(attention.clone()),
        cache: ForwardCache::Document(DocumentCache {
            patch_tokens: patch_tokens.to_vec(),
            inputs,
            hidden,
            attention: attention.into_inner(),
            pooled,
            norm: nrm,
            embedding: e,
        }),
    })
}

pub fn encode_document<T: Scalar>(
    doc: &SyntheticDocument,
    params: &EncoderParams<T>,
) -> Result<EncodeOutput<T>> {
    encode_patches(&doc.patch_tokens, params)
}

/// Encodes a bag of tokens (query or description).
pub fn encode_text<T: Scalar>(token_ids: &[u32], params: &EncoderParams<T>) -> Result<EncodeOutput<T>> {
    if token_ids.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    let vocab = params.token_table.rows();
    let dm = params.token_table.cols();
    let inv = T::one() / T::of_usize(token_ids.len());
    let mut mean = vec![T::zero(); dm];
    for &t in token_ids {
        check_token(t, vocab)?;
        axpy(inv, params.token_table.row(t as usize), &mut mean);
    }
    let mut y = vec![T::zero(); params.output_projection.cols()];
    params.output_projection.left_mul(&mean, &mut y);
    let (nrm, e) = normalize(&y)?;
    Ok(EncodeOutput {
        embedding: Vector::new(e.clone())?,
        attention_weights: None,
        cache: ForwardCache::Text(TextCache {
            tokens: token_ids.to_vec(),
            mean,
            norm: nrm,
            embedding: e,
        }),
    })
}

/// Unit-normalised `h_p · W_out` for every patch of an encoded document.
pub fn patch_embeddings<T: Scalar>(
    cache: &ForwardCache<T>,
    params: &EncoderParams<T>,
) -> Result<Vec<Vector<T>>> {
    let ForwardCache::Document(c) = cache else {
        return Err(Error::invalid("patch embeddings need a document cache"));
    };
    let de = params.output_projection.cols();
    (0..c.hidden.rows())
        .map(|p| {
            let mut y = vec![T::zero(); de];
            params.output_projection.left_mul(c.hidden.row(p), &mut y);
            Vector::new(y)?.normalized()
        })
        .collect()
}

/// Per-item gradient pieces; dense parts are kept whole, sparse (token and
/// position) parts are kept as per-patch input gradients and scattered
/// during the serial reduction.
struct ItemGrad<T> {
    output_projection: Matrix<T>,
    patch_projection: Option<Matrix<T>>,
    attention_query: Option<Vec<T>>,
    /// Gradient w.r.t. each patch input `x_p` (documents) or the mean token
    /// vector (text, single row).
    input_grads: Matrix<T>,
}

fn check_cache<T: Scalar>(cache: &ForwardCache<T>, params: &EncoderParams<T>) -> Result<()> {
    let dm = params.token_table.cols();
    let de = params.output_projection.cols();
    let (emb, width) = match cache {
        ForwardCache::Document(c) => {
            if c.inputs.rows() != params.patch_count() {
                return Err(Error::DimensionMismatch {
                    expected: params.patch_count(),
                    actual: c.inputs.rows(),
                });
            }
            (c.embedding.len(), c.inputs.cols())
        }
        ForwardCache::Text(c) => (c.embedding.len(), c.mean.len()),
    };
    if emb != de {
        return Err(Error::DimensionMismatch {
            expected: de,
            actual: emb,
        });
    }
    if width != dm {
        return Err(Error::DimensionMismatch {
            expected: dm,
            actual: width,
        });
    }
    Ok(())
}

fn item_backward<T: Scalar>(
    cache: &ForwardCache<T>,
    grad_embedding: &[T],
    params: &EncoderParams<T>,
) -> ItemGrad<T> {
    let dm = params.token_table.cols();
    let de = params.output_projection.cols();
    // through the L2 normalisation: g_y = (g_e - e (e·g_e)) / ‖y‖
    let (e, nrm) = match cache {
        ForwardCache::Document(c) => (&c.embedding, c.norm),
        ForwardCache::Text(c) => (&c.embedding, c.norm),
    };
    let proj = dot(e, grad_embedding);
    let g_y: Vec<T> = grad_embedding
        .iter()
        .zip(e)
        .map(|(&g, &ei)| (g - ei * proj) / nrm)
        .collect();

    let mut g_out = Matrix::zeros(dm, de);
    match cache {
        ForwardCache::Text(c) => {
            g_out.add_outer(&c.mean, &g_y);
            let mut g_x = Matrix::zeros(1, dm);
            params.output_projection.right_mul(&g_y, g_x.row_mut(0));
            ItemGrad {
                output_projection: g_out,
                patch_projection: None,
                attention_query: None,
                input_grads: g_x,
            }
        }
        ForwardCache::Document(c) => {
            let n = c.hidden.rows();
            g_out.add_outer(&c.pooled, &g_y);
            let mut g_z = vec![T::zero(); dm];
            params.output_projection.right_mul(&g_y, &mut g_z);

            // z = Σ α_p h_p
            let g_alpha: Vec<T> = (0..n).map(|p| dot(c.hidden.row(p), &g_z)).collect();
            let mean_g = dot(&c.attention, &g_alpha);
            let mut g_u = vec![T::zero(); dm];
            let mut g_patch = Matrix::zeros(dm, dm);
            let mut g_inputs = Matrix::zeros(n, dm);
            let mut g_h = vec![T::zero(); dm];
            for p in 0..n {
                let alpha = c.attention[p];
                let g_logit = alpha * (g_alpha[p] - mean_g);
                axpy(g_logit, c.hidden.row(p), &mut g_u);
                for ((gh, &gz), &u) in g_h.iter_mut().zip(&g_z).zip(&params.attention_query) {
                    *gh = alpha * gz + g_logit * u;
                }
                g_patch.add_outer(c.inputs.row(p), &g_h);
                params.patch_projection.right_mul(&g_h, g_inputs.row_mut(p));
            }
            ItemGrad {
                output_projection: g_out,
                patch_projection: Some(g_patch),
                attention_query: Some(g_u),
                input_grads: g_inputs,
            }
        }
    }
}

fn reduce_item<T: Scalar>(cache: &ForwardCache<T>, item: &ItemGrad<T>, grads: &mut EncoderParams<T>) {
    axpy(
        T::one(),
        item.output_projection.as_slice(),
        grads.output_projection.as_mut_slice(),
    );
    if let Some(g) = &item.patch_projection {
        axpy(T::one(), g.as_slice(), grads.patch_projection.as_mut_slice());
    }
    if let Some(g) = &item.attention_query {
        axpy(T::one(), g, &mut grads.attention_query);
    }
    match cache {
        ForwardCache::Text(c) => {
            let inv = T::one() / T::of_usize(c.tokens.len());
            for &t in &c.tokens {
                axpy(inv, item.input_grads.row(0), grads.token_table.row_mut(t as usize));
            }
        }
        ForwardCache::Document(c) => {
            for (p, toks) in c.patch_tokens.iter().enumerate() {
                let g = item.input_grads.row(p);
                axpy(T::one(), g, grads.position_table.row_mut(p));
                let inv = T::one() / T::of_usize(toks.len());
                for &t in toks {
                    axpy(inv, g, grads.token_table.row_mut(t as usize));
                }
            }
        }
    }
}

/// Accumulates `∂L/∂θ` into `grads` given `∂L/∂e` for each encoded item.
pub fn accumulate_backward<T: Scalar>(
    params: &EncoderParams<T>,
    caches: &[&ForwardCache<T>],
    grad_embeddings: &[&[T]],
    grads: &mut EncoderParams<T>,
) -> Result<()> {
    if caches.len() != grad_embeddings.len() {
        return Err(Error::DimensionMismatch {
            expected: caches.len(),
            actual: grad_embeddings.len(),
        });
    }
    for (cache, g) in caches.iter().zip(grad_embeddings) {
        check_cache(cache, params)?;
        if g.len() != params.output_projection.cols() {
            return Err(Error::DimensionMismatch {
                expected: params.output_projection.cols(),
                actual: g.len(),
            });
        }
    }
    if grads.token_table.shape() != params.token_table.shape()
        || grads.position_table.shape() != params.position_table.shape()
        || grads.output_projection.shape() != params.output_projection.shape()
    {
        return Err(Error::invalid("gradient buffer does not match parameters"));
    }
    let items: Vec<ItemGrad<T>> = caches
        .par_iter()
        .zip(grad_embeddings.par_iter())
        .map(|(c, g)| item_backward(c, g, params))
        .collect();
    for (cache, item) in caches.iter().zip(&items) {
        reduce_item(cache, item, grads);
    }
    Ok(())
}

/// Exact parameter gradients for a batch of encoded items.
pub fn backward<T: Scalar>(
    params: &EncoderParams<T>,
    caches: &[&ForwardCache<T>],
    grad_embeddings: &[&[T]],
) -> Result<EncoderParams<T>> {
    let mut grads = params.zeros_like();
    accumulate_backward(params, caches, grad_embeddings, &mut grads)?;
    Ok(grads)
}
