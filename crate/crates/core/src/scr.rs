//! Self-correlational representation: local self-correlation, the bottleneck
//! block `g` and the residual `F = g(R) + Z`.

use rand::Rng;
use relcorr_tensor::{init, ParamSet, Real, Tape, Tensor, Var, EPS};

use crate::error::{CoreError, Result};
use crate::graph::{add_norm, Graph};

#[derive(Clone, Debug, PartialEq)]
pub struct ScrConfig {
    pub enabled: bool,
    pub du: usize,
    pub dv: usize,
    pub c_prime: usize,
    pub group_size: usize,
}

impl Default for ScrConfig {
    fn default() -> Self {
        ScrConfig { enabled: true, du: 2, dv: 2, c_prime: 64, group_size: 1 }
    }
}

impl ScrConfig {
    pub fn window(&self) -> (usize, usize) {
        (2 * self.du + 1, 2 * self.dv + 1)
    }

    /// Number of unpadded 3x3 layers taking `U x V` to `1 x 1`.
    pub fn layers(&self) -> usize {
        self.du
    }

    pub fn validate(&self, channels: usize, extent: usize) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if self.du != self.dv {
            return Err(CoreError::config(
                "scr.dv",
                format!("window {}x{} cannot be reduced to 1x1 by square 3x3 layers", 2 * self.du + 1, 2 * self.dv + 1),
            ));
        }
        if self.c_prime == 0 {
            return Err(CoreError::config("scr.c_prime", "must be positive"));
        }
        if self.group_size == 0 || channels % self.group_size != 0 {
            return Err(CoreError::config(
                "scr.group_size",
                format!("{} does not divide {channels} channels", self.group_size),
            ));
        }
        let (u, v) = self.window();
        if extent < u || extent < v {
            return Err(CoreError::config("scr.du", format!("window {u}x{v} exceeds feature extent {extent}")));
        }
        Ok(())
    }

    pub fn init_params<T: Real>(&self, channels: usize, params: &mut ParamSet<T>, buffers: &mut ParamSet<T>, rng: &mut impl Rng) {
        let (cg, cp) = (channels / self.group_size, self.c_prime);
        params.insert("scr.pw_in.weight", init::kaiming(&[cg, cp], cg, rng));
        add_norm(params, buffers, "scr.bn_in", cp);
        for k in 0..self.layers() {
            params.insert(format!("scr.conv{k}.weight"), init::kaiming(&[3, 3, cp, cp], 9 * cp, rng));
            add_norm(params, buffers, &format!("scr.bn{k}"), cp);
        }
        params.insert("scr.pw_out.weight", Tensor::zeros(&[cp, channels]));
        params.insert("scr.pw_out.bias", Tensor::zeros(&[channels]));
    }
}

/// `R` of `Z [B, H, W, C]`, shape `[B, H, W, U, V, C / group]`.
///
/// With `group == 1` entries are channel-wise products of unit-normalized
/// centre and neighbour vectors; with larger groups each entry is the cosine
/// of one contiguous channel group.
pub fn self_correlation<T: Real>(tape: &mut Tape<T>, z: Var, du: usize, dv: usize, group: usize) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    if s.len() != 4 {
        return Err(relcorr_tensor::TensorError::Shape { op: "self_correlation", detail: format!("{s:?}") }.into());
    }
    if group == 0 || s[3] % group != 0 {
        return Err(relcorr_tensor::TensorError::Param {
            op: "self_correlation",
            detail: format!("group size {group} does not divide {} channels", s[3]),
        }
        .into());
    }
    let unit = if group == 1 {
        tape.l2_normalize(z, EPS)?
    } else {
        let grouped = tape.reshape(z, &[s[0], s[1], s[2], s[3] / group, group])?;
        let n = tape.l2_normalize(grouped, EPS)?;
        tape.reshape(n, &s)?
    };
    Ok(tape.neighborhood_product(unit, du, dv, group)?)
}

/// Block `g`: `R [B, H, W, U, V, Cg]` to `[B, H, W, C]`.
pub fn scr_block_g<T: Real>(g: &mut Graph<'_, T>, cfg: &ScrConfig, r: Var) -> Result<Var> {
    let s = g.tape.shape(r).to_vec();
    let (u, v) = cfg.window();
    if s.len() != 6 || s[3] != u || s[4] != v {
        return Err(CoreError::config("scr.du", format!("correlation tensor {s:?} does not match window {u}x{v}")));
    }
    if cfg.du != cfg.dv {
        return Err(CoreError::config("scr.dv", "window must be square to reduce to 1x1"));
    }
    let (b, h, w, cg) = (s[0], s[1], s[2], s[5]);
    let positions = b * h * w;
    let cp = cfg.c_prime;
    let rows = g.tape.reshape(r, &[positions * u * v, cg])?;
    let w_in = g.param("scr.pw_in.weight")?;
    let x = g.tape.matmul(rows, w_in)?;
    let x = g.batch_norm(x, "scr.bn_in")?;
    let mut x = g.tape.relu(x)?;
    let mut extent = u;
    for k in 0..cfg.layers() {
        let maps = g.tape.reshape(x, &[positions, extent, extent, cp])?;
        let kernel = g.param(&format!("scr.conv{k}.weight"))?;
        let y = g.tape.conv2d(maps, kernel, 1, 0)?;
        extent -= 2;
        let y = g.tape.reshape(y, &[positions * extent * extent, cp])?;
        let y = g.batch_norm(y, &format!("scr.bn{k}"))?;
        x = g.tape.relu(y)?;
    }
    debug_assert_eq!(extent, 1);
    let w_out = g.param("scr.pw_out.weight")?;
    let b_out = g.param("scr.pw_out.bias")?;
    let y = g.tape.matmul(x, w_out)?;
    let y = g.tape.add_bias(y, b_out)?;
    let c = g.tape.shape(y)[1];
    Ok(g.tape.reshape(y, &[b, h, w, c])?)
}

/// `F = g(R(Z)) + Z`, or `Z` itself when disabled.
pub fn scr_forward<T: Real>(g: &mut Graph<'_, T>, cfg: &ScrConfig, z: Var) -> Result<Var> {
    if !cfg.enabled {
        return Ok(z);
    }
    let r = self_correlation(g.tape, z, cfg.du, cfg.dv, cfg.group_size)?;
    let gr = scr_block_g(g, cfg, r)?;
    Ok(g.tape.add(gr, z)?)
}
