//! Straight-line reference computations in `f64`.
//!
//! Every function here is written directly from the defining sum with plain
//! nested loops over flat row-major slices and shares no code with the
//! production kernels it is used to check.

/// 2D convolution of `[b, h, w, ci]` with kernel `[kh, kw, ci, co]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    (b, h, w, ci): (usize, usize, usize, usize),
    k: &[f64],
    (kh, kw, co): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, (usize, usize)) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * oh * ow * co];
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..co {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for c in 0..ci {
                                let xv = x[((n * h + iy as usize) * w + ix as usize) * ci + c];
                                let kv = k[((ky * kw + kx) * ci + c) * co + o];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((n * oh + oy) * ow + ox) * co + o] = acc;
                }
            }
        }
    }
    (out, (oh, ow))
}

fn inside(i: isize, n: usize) -> bool {
    i >= 0 && (i as usize) < n
}

/// Dense 4D convolution, padding 1, of `[p, d0, d1, d2, d3, ci]` with `[3,3,3,3,ci,co]`.
pub fn conv4d(x: &[f64], p: usize, d: [usize; 4], ci: usize, k: &[f64], co: usize) -> Vec<f64> {
    let [a, b, c, e] = d;
    let idx = |n: usize, i: [usize; 4], ch: usize, chans: usize| {
        (((((n * a + i[0]) * b + i[1]) * c + i[2]) * e + i[3]) * chans) + ch
    };
    let mut out = vec![0.0; p * a * b * c * e * co];
    for n in 0..p {
        for i0 in 0..a {
            for i1 in 0..b {
                for i2 in 0..c {
                    for i3 in 0..e {
                        for o in 0..co {
                            let mut acc = 0.0;
                            for t0 in 0..3 {
                                for t1 in 0..3 {
                                    for t2 in 0..3 {
                                        for t3 in 0..3 {
                                            let j = [
                                                i0 as isize + t0 as isize - 1,
                                                i1 as isize + t1 as isize - 1,
                                                i2 as isize + t2 as isize - 1,
                                                i3 as isize + t3 as isize - 1,
                                            ];
                                            if !(inside(j[0], a) && inside(j[1], b) && inside(j[2], c) && inside(j[3], e)) {
                                                continue;
                                            }
                                            let j = j.map(|v| v as usize);
                                            for cin in 0..ci {
                                                let kv = k[((((t0 * 3 + t1) * 3 + t2) * 3 + t3) * ci + cin) * co + o];
                                                acc += x[idx(n, j, cin, ci)] * kv;
                                            }
                                        }
                                    }
                                }
                            }
                            out[idx(n, [i0, i1, i2, i3], o, co)] = acc;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Depthwise 3x3 convolution (padding 1) of one 2D plane of a 4D map.
/// `query_plane` selects dims (d0, d1); otherwise (d2, d3). Kernel `[3, 3, ch]`.
pub fn plane_conv(x: &[f64], p: usize, d: [usize; 4], ch: usize, k: &[f64], query_plane: bool) -> Vec<f64> {
    let [a, b, c, e] = d;
    let idx = |n: usize, i: [usize; 4], q: usize| (((((n * a + i[0]) * b + i[1]) * c + i[2]) * e + i[3]) * ch) + q;
    let mut out = vec![0.0; x.len()];
    for n in 0..p {
        for i0 in 0..a {
            for i1 in 0..b {
                for i2 in 0..c {
                    for i3 in 0..e {
                        for q in 0..ch {
                            let mut acc = 0.0;
                            for ty in 0..3 {
                                for tx in 0..3 {
                                    let mut j = [i0 as isize, i1 as isize, i2 as isize, i3 as isize];
                                    let (ya, xa, ny, nx) = if query_plane { (0, 1, a, b) } else { (2, 3, c, e) };
                                    j[ya] += ty as isize - 1;
                                    j[xa] += tx as isize - 1;
                                    if !inside(j[ya], ny) || !inside(j[xa], nx) {
                                        continue;
                                    }
                                    acc += k[(ty * 3 + tx) * ch + q] * x[idx(n, j.map(|v| v as usize), q)];
                                }
                            }
                            out[idx(n, [i0, i1, i2, i3], q)] = acc;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-row `[rows, ci] @ [ci, co]`.
pub fn pointwise(x: &[f64], rows: usize, ci: usize, w: &[f64], co: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * co];
    for r in 0..rows {
        for o in 0..co {
            let mut acc = 0.0;
            for c in 0..ci {
                acc += x[r * ci + c] * w[c * co + o];
            }
            out[r * co + o] = acc;
        }
    }
    out
}

fn unit(v: &[f64], eps: f64) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(eps);
    v.iter().map(|a| a / n).collect()
}

fn unit_groups(v: &[f64], group: usize, eps: f64) -> Vec<f64> {
    if group == 1 {
        return unit(v, eps);
    }
    v.chunks(group).flat_map(|g| unit(g, eps)).collect()
}

/// Self-correlation of `[h, w, c]` over a `(2du+1) x (2dv+1)` window, output
/// `[h, w, u, v, c / group]`. With `group == 1` each entry is the channel-wise
/// product of unit vectors; otherwise it is the cosine of matching channel groups.
pub fn self_correlation(z: &[f64], (h, w, c): (usize, usize, usize), du: usize, dv: usize, group: usize, eps: f64) -> Vec<f64> {
    let (u, v, cg) = (2 * du + 1, 2 * dv + 1, c / group);
    let mut out = vec![0.0; h * w * u * v * cg];
    for y in 0..h {
        for x in 0..w {
            let center = unit_groups(&z[(y * w + x) * c..(y * w + x + 1) * c], group, eps);
            for pu in 0..u {
                for pv in 0..v {
                    let ny = y as isize + pu as isize - du as isize;
                    let nx = x as isize + pv as isize - dv as isize;
                    if !inside(ny, h) || !inside(nx, w) {
                        continue;
                    }
                    let o = (ny as usize * w + nx as usize) * c;
                    let nbr = unit_groups(&z[o..o + c], group, eps);
                    for g in 0..cg {
                        let mut acc = 0.0;
                        for k in g * group..(g + 1) * group {
                            acc += center[k] * nbr[k];
                        }
                        out[(((y * w + x) * u + pu) * v + pv) * cg + g] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Cosine similarity of every query position with every support position, `[hw, hw]`.
pub fn cross_correlation(fq: &[f64], fs: &[f64], positions: usize, c: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; positions * positions];
    for i in 0..positions {
        for j in 0..positions {
            let a = &fq[i * c..(i + 1) * c];
            let b = &fs[j * c..(j + 1) * c];
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
            out[i * positions + j] = (dot / (na * nb)).clamp(-1.0, 1.0);
        }
    }
    out
}

pub fn softmax(x: &[f64], temperature: f64) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| ((v - m) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Sample mean and 95% half-width `1.96 * s / sqrt(n)` with the `n - 1` estimator.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    let sd = (ss / (n - 1.0)).sqrt();
    (mean, 1.96 * sd / n.sqrt())
}

/// Co-attention over a `[n, n]` matrix indexed `[query, support]`.
/// Query side: average over support columns of the column-wise softmax.
pub fn co_attention(c: &[f64], n: usize, gamma: f64, query_side: bool) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for fixed in 0..n {
        let line: Vec<f64> = (0..n).map(|free| if query_side { c[free * n + fixed] } else { c[fixed * n + free] }).collect();
        let p = softmax(&line, gamma);
        for (o, v) in out.iter_mut().zip(p) {
            *o += v / n as f64;
        }
    }
    out
}
