// Raw loops behind the tape ops. All arrays are row-major.

/// `c[m,n] = a[m,k] * b[k,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if n == 1 {
        for (i, ci) in c.iter_mut().enumerate() {
            *ci = dot(&a[i * k..(i + 1) * k], b);
        }
        return c;
    }
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `ga[m,k] += g[m,n] * b^T`
pub(crate) fn matmul_grad_a(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        if n == 1 {
            let gi = grow[0];
            if gi == 0.0 {
                continue;
            }
            for (gav, bv) in ga[i * k..(i + 1) * k].iter_mut().zip(b) {
                *gav += gi * bv;
            }
        } else {
            for p in 0..k {
                ga[i * k + p] += dot(grow, &b[p * n..(p + 1) * n]);
            }
        }
    }
}

/// `u v^T` as a row-major `[u.len(), v.len()]` array.
pub(crate) fn outer(u: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(u.len() * v.len());
    for &ui in u {
        if ui == 0.0 {
            out.resize(out.len() + v.len(), 0.0);
        } else {
            out.extend(v.iter().map(|vv| ui * vv));
        }
    }
    out
}

/// `gb[k,n] += a^T * g[m,n]`
pub(crate) fn matmul_grad_b(a: &[f64], g: &[f64], gb: &mut [f64], m: usize, k: usize, n: usize) {
    if n == 1 {
        for (i, &gi) in g.iter().enumerate() {
            if gi == 0.0 {
                continue;
            }
            for (gbv, av) in gb.iter_mut().zip(&a[i * k..(i + 1) * k]) {
                *gbv += gi * av;
            }
        }
        return;
    }
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (gbv, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *gbv += aip * gv;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // independent accumulators let the compiler vectorize without reassociating
    let b = &b[..a.len()];
    let mut acc = [0.0f64; 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output positions `lo..hi` along one axis whose input coordinate
    /// `out * stride + tap - pad` lands inside `0..len`.
    fn valid_range(&self, tap: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = tap as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        // largest o with o*s + off <= len-1
        let top = len as isize - 1 - off;
        let hi = if top < 0 { 0 } else { top / s + 1 };
        let lo = lo.max(0) as usize;
        let hi = (hi as usize).min(out_len);
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv2d(input: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.o * plane];
    for o in 0..g.o {
        let oplane = &mut out[o * plane..(o + 1) * plane];
        oplane.fill(bias[o]);
        for c in 0..g.c {
            let iplane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (ylo, yhi) = g.valid_range(ky, g.h, g.oh);
                for kx in 0..g.k {
                    let wv = weight[((o * g.c + c) * g.k + ky) * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (xlo, xhi) = g.valid_range(kx, g.w, g.ow);
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ky - g.pad;
                        let irow = &iplane[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut oplane[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let ix0 = xlo + kx - g.pad;
                            for (ov, iv) in orow[xlo..xhi].iter_mut().zip(&irow[ix0..ix0 + (xhi - xlo)]) {
                                *ov += wv * iv;
                            }
                        } else {
                            for ox in xlo..xhi {
                                orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates gradients of a convolution. `gi` may be `None` when the input
/// does not require a gradient.
pub(crate) fn conv2d_backward(
    input: &[f64],
    weight: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    mut gi: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    mut gb: Option<&mut [f64]>,
) {
    let plane = g.oh * g.ow;
    for o in 0..g.o {
        let gplane = &gout[o * plane..(o + 1) * plane];
        if let Some(gb) = gb.as_deref_mut() {
            gb[o] += gplane.iter().sum::<f64>();
        }
        for c in 0..g.c {
            let ibase = c * g.h * g.w;
            for ky in 0..g.k {
                let (ylo, yhi) = g.valid_range(ky, g.h, g.oh);
                for kx in 0..g.k {
                    let widx = ((o * g.c + c) * g.k + ky) * g.k + kx;
                    let wv = weight[widx];
                    let (xlo, xhi) = g.valid_range(kx, g.w, g.ow);
                    let mut acc = 0.0;
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gplane[oy * g.ow..(oy + 1) * g.ow];
                        let row0 = ibase + iy * g.w;
                        if g.stride == 1 {
                            let ix0 = row0 + xlo + kx - g.pad;
                            let span = xhi - xlo;
                            let gs = &grow[xlo..xhi];
                            if gw.is_some() {
                                acc += dot(gs, &input[ix0..ix0 + span]);
                            }
                            if let Some(gi) = gi.as_deref_mut() {
                                for (d, gv) in gi[ix0..ix0 + span].iter_mut().zip(gs) {
                                    *d += wv * gv;
                                }
                            }
                        } else {
                            for ox in xlo..xhi {
                                let ix = ox * g.stride + kx - g.pad;
                                let gv = grow[ox];
                                acc += gv * input[row0 + ix];
                                if let Some(gi) = gi.as_deref_mut() {
                                    gi[row0 + ix] += wv * gv;
                                }
                            }
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

/// Non-overlapping max pooling over `[c, h, w]`. Returns the pooled values
/// and, per output, the flat input index of the (first) maximum.
pub(crate) fn maxpool2d(input: &[f64], c: usize, h: usize, w: usize, k: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * k + dy) * w + ox * k + dx;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
