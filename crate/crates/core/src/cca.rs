//! Cross-correlational attention: 4D cross-correlation, convolutional
//! matching, co-attention and attentive pooling.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use relcorr_tensor::{init, ParamSet, Plane, Real, Tape, Tensor, TensorError, Var, EPS};

use crate::error::{CoreError, Result};
use crate::graph::{add_norm, Graph};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CcaMode {
    Off,
    Nonparametric,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelMode {
    Separable,
    Vanilla,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormScope {
    /// One group per query-support pair.
    Tensor,
    /// One group per query position.
    Slice,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Query,
    Support,
}

macro_rules! keyword_enum {
    ($ty:ty, $($variant:path => $word:literal),+) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($word => Ok($variant),)+
                    other => Err(format!("unknown value `{other}`")),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $word,)+ })
            }
        }
    };
}

keyword_enum!(CcaMode, CcaMode::Off => "off", CcaMode::Nonparametric => "nonparametric", CcaMode::Full => "full");
keyword_enum!(KernelMode, KernelMode::Separable => "separable", KernelMode::Vanilla => "vanilla");
keyword_enum!(NormScope, NormScope::Tensor => "tensor", NormScope::Slice => "slice");

#[derive(Clone, Debug, PartialEq)]
pub struct CcaConfig {
    pub mode: CcaMode,
    pub c_prime: usize,
    pub c_l: usize,
    pub kernel: KernelMode,
    pub gamma: f64,
    pub norm_scope: NormScope,
}

impl Default for CcaConfig {
    fn default() -> Self {
        CcaConfig {
            mode: CcaMode::Full,
            c_prime: 64,
            c_l: 16,
            kernel: KernelMode::Separable,
            gamma: 5.0,
            norm_scope: NormScope::Tensor,
        }
    }
}

impl CcaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(CoreError::config("cca.gamma", format!("{} must be positive", self.gamma)));
        }
        if self.c_l == 0 {
            return Err(CoreError::config("cca.c_l", "must be at least 1"));
        }
        if self.c_prime == 0 {
            return Err(CoreError::config("cca.c_prime", "must be positive"));
        }
        Ok(())
    }

    pub fn init_params<T: Real>(&self, channels: usize, params: &mut ParamSet<T>, buffers: &mut ParamSet<T>, rng: &mut impl Rng) {
        if self.mode != CcaMode::Full {
            return;
        }
        params.insert("cca.reduce.weight", init::kaiming(&[channels, self.c_prime], channels, rng));
        init_conv4d(params, "cca.h1", self.kernel, 1, self.c_l, rng);
        add_norm(params, buffers, "cca.bn1", self.c_l);
        init_conv4d(params, "cca.h2", self.kernel, self.c_l, 1, rng);
    }
}

fn init_conv4d<T: Real>(params: &mut ParamSet<T>, prefix: &str, mode: KernelMode, ci: usize, co: usize, rng: &mut impl Rng) {
    match mode {
        KernelMode::Vanilla => {
            params.insert(format!("{prefix}.kernel"), init::kaiming(&[3, 3, 3, 3, ci, co], 81 * ci, rng));
        }
        KernelMode::Separable => {
            params.insert(format!("{prefix}.plane_q"), init::kaiming(&[3, 3, ci], 9, rng));
            params.insert(format!("{prefix}.plane_s"), init::kaiming(&[3, 3, ci], 9, rng));
            params.insert(format!("{prefix}.point"), init::kaiming(&[ci, co], ci, rng));
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> CoreError {
    TensorError::Shape { op, detail }.into()
}

/// Point-wise projection `[..., C]` to `[..., C']` with `cca.reduce.weight`.
pub fn reduce_channels<T: Real>(g: &mut Graph<'_, T>, f: Var) -> Result<Var> {
    let w = g.param("cca.reduce.weight")?;
    let s = g.tape.shape(f).to_vec();
    let c = *s.last().unwrap();
    let rows = g.tape.reshape(f, &[s.iter().product::<usize>() / c, c])?;
    let y = g.tape.matmul(rows, w)?;
    let mut out = s;
    *out.last_mut().unwrap() = g.tape.shape(w)[1];
    Ok(g.tape.reshape(y, &out)?)
}

/// Cosine similarity of every query position with every support position.
///
/// Maps `[P, H, W, C]` give `[P, H, W, H, W]` indexed `(x_q, x_s)`.
pub fn cross_correlation<T: Real>(tape: &mut Tape<T>, fq: Var, fs: Var) -> Result<Var> {
    let s = tape.shape(fq).to_vec();
    if s.len() != 4 || tape.shape(fs) != s.as_slice() {
        return Err(shape_err("cross_correlation", format!("{s:?} vs {:?}", tape.shape(fs))));
    }
    let (p, h, w, c) = (s[0], s[1], s[2], s[3]);
    let q = tape.l2_normalize(fq, EPS)?;
    let q = tape.reshape(q, &[p, h * w, c])?;
    let k = tape.l2_normalize(fs, EPS)?;
    let k = tape.reshape(k, &[p, h * w, c])?;
    let corr = tape.bmm_t(q, k, false, true)?;
    let corr = tape.clamp(corr, -1.0, 1.0)?;
    Ok(tape.reshape(corr, &[p, h, w, h, w])?)
}

/// One 4D layer over `[P, A, B, C, D, Cin]` with parameters under `prefix`.
pub fn conv4d_layer<T: Real>(g: &mut Graph<'_, T>, x: Var, prefix: &str, mode: KernelMode) -> Result<Var> {
    match mode {
        KernelMode::Vanilla => {
            let k = g.param(&format!("{prefix}.kernel"))?;
            Ok(g.tape.conv4d(x, k)?)
        }
        KernelMode::Separable => {
            let kq = g.param(&format!("{prefix}.plane_q"))?;
            let ks = g.param(&format!("{prefix}.plane_s"))?;
            let pw = g.param(&format!("{prefix}.point"))?;
            conv4d_separable(g.tape, x, kq, ks, pw)
        }
    }
}

/// Query-plane 3x3, support-plane 3x3, then point-wise channel mixing.
pub fn conv4d_separable<T: Real>(tape: &mut Tape<T>, x: Var, plane_q: Var, plane_s: Var, point: Var) -> Result<Var> {
    let y = tape.conv4d_plane(x, plane_q, Plane::Query)?;
    let y = tape.conv4d_plane(y, plane_s, Plane::Support)?;
    let mut s = tape.shape(y).to_vec();
    let ci = s[5];
    let rows = tape.reshape(y, &[s.iter().product::<usize>() / ci, ci])?;
    let mixed = tape.matmul(rows, point)?;
    s[5] = tape.shape(point)[1];
    Ok(tape.reshape(mixed, &s)?)
}

/// `h`: 1 -> C_l -> 1 channels with norm and ReLU between, then standardization.
pub fn matching_block_h<T: Real>(g: &mut Graph<'_, T>, cfg: &CcaConfig, corr: Var) -> Result<Var> {
    let s = g.tape.shape(corr).to_vec();
    if s.len() != 5 {
        return Err(shape_err("matching_block_h", format!("{s:?}")));
    }
    let (p, hw) = (s[0], s[1] * s[2]);
    let x = g.tape.reshape(corr, &[p, s[1], s[2], s[3], s[4], 1])?;
    let x = conv4d_layer(g, x, "cca.h1", cfg.kernel)?;
    let rows = g.tape.reshape(x, &[p * hw * hw, cfg.c_l])?;
    let x = g.batch_norm(rows, "cca.bn1")?;
    let x = g.tape.relu(x)?;
    let x = g.tape.reshape(x, &[p, s[1], s[2], s[3], s[4], cfg.c_l])?;
    let x = conv4d_layer(g, x, "cca.h2", cfg.kernel)?;
    let group = match cfg.norm_scope {
        NormScope::Tensor => hw * hw,
        NormScope::Slice => hw,
    };
    let x = g.tape.standardize(x, group, EPS)?;
    Ok(g.tape.reshape(x, &s)?)
}

/// Attention `[P, H, W]` from `[P, H, W, H, W]`.
///
/// The query map averages, over support positions, the softmax across query
/// positions; the support map swaps the roles.
pub fn co_attention<T: Real>(tape: &mut Tape<T>, corr: Var, gamma: f64, side: Side) -> Result<Var> {
    let s = tape.shape(corr).to_vec();
    if s.len() != 5 {
        return Err(shape_err("co_attention", format!("{s:?}")));
    }
    let (p, hq, wq, hs, ws) = (s[0], s[1], s[2], s[3], s[4]);
    let flat = tape.reshape(corr, &[p, hq * wq, hs * ws])?;
    let (soft_axis, mean_axis, out) = match side {
        Side::Query => (1, 2, [p, hq, wq]),
        Side::Support => (2, 1, [p, hs, ws]),
    };
    let a = tape.softmax(flat, soft_axis, gamma)?;
    let a = tape.mean_axis(a, mean_axis)?;
    Ok(tape.reshape(a, &out)?)
}

/// `sum_x A(x) F(x)` for `F [P, H, W, C]` and `A [P, H, W]`, giving `[P, C]`.
pub fn attentive_pool<T: Real>(tape: &mut Tape<T>, f: Var, a: Var) -> Result<Var> {
    let fs = tape.shape(f).to_vec();
    let asz = tape.shape(a).to_vec();
    if fs.len() != 4 || asz != fs[..3] {
        return Err(shape_err("attentive_pool", format!("features {fs:?} attention {asz:?}")));
    }
    let (p, hw, c) = (fs[0], fs[1] * fs[2], fs[3]);
    let w = tape.reshape(a, &[p, 1, hw])?;
    let x = tape.reshape(f, &[p, hw, c])?;
    let y = tape.bmm(w, x)?;
    Ok(tape.reshape(y, &[p, c])?)
}

/// Per-pair outputs of the cross-correlational path.
pub struct PairEmbedding {
    /// Attended query embeddings `[P, C]`.
    pub q: Var,
    /// Attended support embeddings `[P, C]`.
    pub s: Var,
    /// Refined correlation `[P, H, W, H, W]`, absent when the module is off.
    pub corr: Option<Var>,
    pub attn_q: Option<Var>,
    pub attn_s: Option<Var>,
}

/// Relational embeddings for each `(query, support)` index pair into `maps [B, H, W, C]`.
pub fn relational_embed_pairs<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &CcaConfig,
    maps: Var,
    pairs: &[(usize, usize)],
) -> Result<PairEmbedding> {
    let s = g.tape.shape(maps).to_vec();
    if s.len() != 4 {
        return Err(shape_err("relational_embed_pairs", format!("{s:?}")));
    }
    let qi: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let si: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    if cfg.mode == CcaMode::Off {
        let pooled = crate::backbone::global_avg_pool(g.tape, maps)?;
        let q = g.tape.index_select(pooled, &qi)?;
        let s = g.tape.index_select(pooled, &si)?;
        return Ok(PairEmbedding { q, s, corr: None, attn_q: None, attn_s: None });
    }
    let corr = if cfg.mode == CcaMode::Full {
        let reduced = reduce_channels(g, maps)?;
        let rq = g.tape.index_select(reduced, &qi)?;
        let rs = g.tape.index_select(reduced, &si)?;
        let c = cross_correlation(g.tape, rq, rs)?;
        matching_block_h(g, cfg, c)?
    } else {
        let fq = g.tape.index_select(maps, &qi)?;
        let fs = g.tape.index_select(maps, &si)?;
        cross_correlation(g.tape, fq, fs)?
    };
    let aq = co_attention(g.tape, corr, cfg.gamma, Side::Query)?;
    let a_s = co_attention(g.tape, corr, cfg.gamma, Side::Support)?;
    let fq = g.tape.index_select(maps, &qi)?;
    let fs = g.tape.index_select(maps, &si)?;
    let q = attentive_pool(g.tape, fq, aq)?;
    let s = attentive_pool(g.tape, fs, a_s)?;
    Ok(PairEmbedding { q, s, corr: Some(corr), attn_q: Some(aq), attn_s: Some(a_s) })
}

/// Matrix-form embeddings of one pair from a given correlation.
///
/// `fq`, `fs` are `[HW, C]`, `corr` is `[HW, HW]` indexed `(x_q, x_s)`. The
/// column-softmaxed matrix multiplies the feature maps directly and the
/// products are averaged over positions.
pub fn relational_embed_matform<T: Real>(fq: &[T], fs: &[T], corr: &[T], hw: usize, gamma: f64) -> Result<(Vec<T>, Vec<T>)> {
    if hw == 0 || corr.len() != hw * hw || fq.len() % hw != 0 || fq.len() != fs.len() {
        return Err(shape_err("relational_embed_matform", format!("hw {hw}, corr {}, features {}", corr.len(), fq.len())));
    }
    if !(gamma > 0.0) {
        return Err(TensorError::Param { op: "relational_embed_matform", detail: format!("gamma {gamma}") }.into());
    }
    let c = fq.len() / hw;
    let g = T::lit(gamma);
    // column softmax: normalize over x_q for each x_s
    let mut col = vec![T::zero(); hw * hw];
    for j in 0..hw {
        let m = (0..hw).map(|i| corr[i * hw + j]).fold(T::neg_infinity(), T::max);
        let z: T = (0..hw).map(|i| ((corr[i * hw + j] - m) / g).exp()).sum();
        for i in 0..hw {
            col[i * hw + j] = ((corr[i * hw + j] - m) / g).exp() / z;
        }
    }
    // row softmax: normalize over x_s for each x_q
    let mut row = vec![T::zero(); hw * hw];
    for i in 0..hw {
        let m = (0..hw).map(|j| corr[i * hw + j]).fold(T::neg_infinity(), T::max);
        let z: T = (0..hw).map(|j| ((corr[i * hw + j] - m) / g).exp()).sum();
        for j in 0..hw {
            row[i * hw + j] = ((corr[i * hw + j] - m) / g).exp() / z;
        }
    }
    let n = T::lit(hw as f64);
    let mut q = vec![T::zero(); c];
    let mut s = vec![T::zero(); c];
    for j in 0..hw {
        // (col^T Fq)(x_s = j)
        for i in 0..hw {
            let wq = col[i * hw + j];
            for k in 0..c {
                q[k] = q[k] + wq * fq[i * c + k];
            }
        }
    }
    for i in 0..hw {
        // (row Fs)(x_q = i)
        for j in 0..hw {
            let ws = row[i * hw + j];
            for k in 0..c {
                s[k] = s[k] + ws * fs[j * c + k];
            }
        }
    }
    Ok((q.into_iter().map(|v| v / n).collect(), s.into_iter().map(|v| v / n).collect()))
}

/// Raw correlation values as a plain tensor, for export and re-import checks.
pub fn pair_slice<T: Real>(t: &Tensor<T>, pair: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    let per = s[1..].iter().product::<usize>();
    let data = t.data()[pair * per..(pair + 1) * per].to_vec();
    Ok(Tensor::new(&s[1..], data)?)
}
