//! Selective state-space scan.
//!
//! Recurrence, per feature d and state n:
//!
//! ```text
//! h_t = exp(Δ_t a) ⊙ h_{t-1} + Δ_t B_t u_t,   h_0 = 0
//! y_t = C_t · h_t + skip ⊙ u_t
//! ```
//!
//! Two forward formulations exist — a step-by-step recurrence and an
//! associative (Hillis–Steele) scan over the affine maps `h ↦ āh + b` —
//! and are required to agree. The tape primitive uses the sequential form
//! and a hand-derived reverse recurrence for the backward pass.

use crate::tape::{GradStore, Var};
use crate::{Error, Result, Tape};

/// Borrowed scan operands. Layouts: `u`, `delta` are `[b,s,d]`;
/// `b_sel`, `c_sel` are `[b,s,n]`; `a` is `[d,n]`; `skip` is `[d]`.
pub struct ScanInputs<'a> {
    pub b: usize,
    pub s: usize,
    pub d: usize,
    pub n: usize,
    pub u: &'a [f64],
    pub delta: &'a [f64],
    pub b_sel: &'a [f64],
    pub c_sel: &'a [f64],
    pub a: &'a [f64],
    pub skip: &'a [f64],
}

/// Output of the sequential scan with everything the backward pass needs.
pub(crate) struct ScanTrace {
    pub y: Vec<f64>,
    /// `[b,s,d,n]` hidden states.
    pub h: Vec<f64>,
    /// `[b,s,d,n]` discretized transitions exp(Δa).
    pub abar: Vec<f64>,
}

pub(crate) fn scan_sequential_trace(inp: &ScanInputs) -> Result<ScanTrace> {
    let (b, s, d, n) = (inp.b, inp.s, inp.d, inp.n);
    let mut y = vec![0.0f64; b * s * d];
    let mut h = vec![0.0f64; b * s * d * n];
    let mut abar = vec![0.0f64; b * s * d * n];
    for bi in 0..b {
        for t in 0..s {
            let dt = &inp.delta[(bi * s + t) * d..(bi * s + t + 1) * d];
            let ut = &inp.u[(bi * s + t) * d..(bi * s + t + 1) * d];
            let bt = &inp.b_sel[(bi * s + t) * n..(bi * s + t + 1) * n];
            let ct = &inp.c_sel[(bi * s + t) * n..(bi * s + t + 1) * n];
            let base = (bi * s + t) * d * n;
            let prev = t.checked_sub(1).map(|tp| (bi * s + tp) * d * n);
            for di in 0..d {
                let arow = &inp.a[di * n..(di + 1) * n];
                let du = dt[di] * ut[di];
                let mut acc = 0.0f64;
                for ni in 0..n {
                    let ab = (dt[di] * arow[ni]).exp();
                    let hp = prev.map_or(0.0, |p| h[p + di * n + ni]);
                    let hv = ab * hp + du * bt[ni];
                    abar[base + di * n + ni] = ab;
                    h[base + di * n + ni] = hv;
                    acc += ct[ni] * hv;
                }
                let yv = acc + inp.skip[di] * ut[di];
                if !yv.is_finite() {
                    return Err(Error::NonFinite(format!("selective_scan at step {t}")));
                }
                y[(bi * s + t) * d + di] = yv;
            }
        }
    }
    Ok(ScanTrace { y, h, abar })
}

/// Sequential scan, output only.
pub fn scan_sequential(inp: &ScanInputs) -> Result<Vec<f64>> {
    scan_sequential_trace(inp).map(|tr| tr.y)
}

/// Associative formulation: inclusive scan over the per-step affine maps
/// `h ↦ ā h + b` with the combiner `(ā2,b2) ∘ (ā1,b1) = (ā1·ā2, ā2·b1 + b2)`,
/// doubling the stride each round.
pub fn scan_associative(inp: &ScanInputs) -> Result<Vec<f64>> {
    let (b, s, d, n) = (inp.b, inp.s, inp.d, inp.n);
    let dn = d * n;
    let mut y = vec![0.0f64; b * s * d];
    let mut coef_a = vec![0.0f64; s * dn];
    let mut coef_b = vec![0.0f64; s * dn];
    for bi in 0..b {
        for t in 0..s {
            let dt = &inp.delta[(bi * s + t) * d..(bi * s + t + 1) * d];
            let ut = &inp.u[(bi * s + t) * d..(bi * s + t + 1) * d];
            let bt = &inp.b_sel[(bi * s + t) * n..(bi * s + t + 1) * n];
            for di in 0..d {
                let arow = &inp.a[di * n..(di + 1) * n];
                let du = dt[di] * ut[di];
                for ni in 0..n {
                    coef_a[t * dn + di * n + ni] = (dt[di] * arow[ni]).exp();
                    coef_b[t * dn + di * n + ni] = du * bt[ni];
                }
            }
        }
        let mut stride = 1usize;
        while stride < s {
            // walk back-to-front so each round reads the previous round only
            for t in (stride..s).rev() {
                for i in 0..dn {
                    let (pa, pb) = (coef_a[(t - stride) * dn + i], coef_b[(t - stride) * dn + i]);
                    let ca = coef_a[t * dn + i];
                    coef_b[t * dn + i] += ca * pb;
                    coef_a[t * dn + i] = ca * pa;
                }
            }
            stride *= 2;
        }
        // h_t = coef_b[t] (h_0 = 0 kills the coef_a term)
        for t in 0..s {
            let ct = &inp.c_sel[(bi * s + t) * n..(bi * s + t + 1) * n];
            let ut = &inp.u[(bi * s + t) * d..(bi * s + t + 1) * d];
            for di in 0..d {
                let mut acc = 0.0f64;
                for ni in 0..n {
                    acc += ct[ni] * coef_b[t * dn + di * n + ni];
                }
                let yv = acc + inp.skip[di] * ut[di];
                if !yv.is_finite() {
                    return Err(Error::NonFinite(format!("selective_scan at step {t}")));
                }
                y[(bi * s + t) * d + di] = yv;
            }
        }
    }
    Ok(y)
}

/// Floating-point operations one batch element of the sequential scan
/// executes, mirrored by the instrumented counter below.
pub fn scan_flops(s: usize, d: usize, n: usize) -> u64 {
    // per (t,d,n): Δ·a, exp, ā·h, Δ·B, ·u, +  => 6; C·h MAC => 2
    // per (t,d): skip·u, +                    => 2
    (s * d * n * 8) as u64 + (s * d * 2) as u64
}

/// Sequential scan that counts every floating-point operation it performs.
pub fn scan_sequential_instrumented(inp: &ScanInputs) -> Result<(Vec<f64>, u64)> {
    let (b, s, d, n) = (inp.b, inp.s, inp.d, inp.n);
    let mut y = vec![0.0f64; b * s * d];
    let mut flops = 0u64;
    let mut h = vec![0.0f64; d * n];
    for bi in 0..b {
        h.fill(0.0);
        for t in 0..s {
            let dt = &inp.delta[(bi * s + t) * d..(bi * s + t + 1) * d];
            let ut = &inp.u[(bi * s + t) * d..(bi * s + t + 1) * d];
            let bt = &inp.b_sel[(bi * s + t) * n..(bi * s + t + 1) * n];
            let ct = &inp.c_sel[(bi * s + t) * n..(bi * s + t + 1) * n];
            for di in 0..d {
                let arow = &inp.a[di * n..(di + 1) * n];
                let mut acc = 0.0f64;
                for ni in 0..n {
                    let ab = (dt[di] * arow[ni]).exp();
                    flops += 2; // mul + exp
                    let hv = ab * h[di * n + ni] + dt[di] * bt[ni] * ut[di];
                    flops += 4; // three muls + add
                    h[di * n + ni] = hv;
                    acc += ct[ni] * hv;
                    flops += 2; // multiply-accumulate
                }
                y[(bi * s + t) * d + di] = acc + inp.skip[di] * ut[di];
                flops += 2;
            }
        }
    }
    Ok((y, flops))
}

impl Tape {
    /// Selective scan as a single differentiable primitive.
    ///
    /// `u`, `delta`: `[b,s,d]`; `b_sel`, `c_sel`: `[b,s,n]`; `a`: `[d,n]`
    /// (actual transition values, expected negative); `skip`: `[d]`.
    pub fn selective_scan(
        &self,
        u: Var,
        delta: Var,
        b_sel: Var,
        c_sel: Var,
        a: Var,
        skip: Var,
    ) -> Result<Var> {
        let su = self.shape_of(u);
        let sd = self.shape_of(delta);
        let sb = self.shape_of(b_sel);
        let sc = self.shape_of(c_sel);
        let sa = self.shape_of(a);
        let ss = self.shape_of(skip);
        if su.len() != 3 || sd != su {
            return Err(Error::ShapeMismatch {
                op: "selective_scan u/delta",
                lhs: su,
                rhs: sd,
            });
        }
        let (b, s, d) = (su[0], su[1], su[2]);
        if sb.len() != 3 || sb[0] != b || sb[1] != s || sc != sb {
            return Err(Error::ShapeMismatch {
                op: "selective_scan b/c",
                lhs: sb,
                rhs: sc,
            });
        }
        let n = sb[2];
        if sa != vec![d, n] || ss != vec![d] {
            return Err(Error::ShapeMismatch {
                op: "selective_scan a/skip",
                lhs: sa,
                rhs: ss,
            });
        }

        let vu = self.value_of(u);
        let vdelta = self.value_of(delta);
        let vb = self.value_of(b_sel);
        let vc = self.value_of(c_sel);
        let va = self.value_of(a);
        let vskip = self.value_of(skip);
        let trace = scan_sequential_trace(&ScanInputs {
            b,
            s,
            d,
            n,
            u: &vu,
            delta: &vdelta,
            b_sel: &vb,
            c_sel: &vc,
            a: &va,
            skip: &vskip,
        })?;
        let (y, h_all, abar) = (trace.y, trace.h, trace.abar);

        let back = move |go: &[f64], store: &mut GradStore| {
            let mut gu = vec![0.0f64; b * s * d];
            let mut gdelta = vec![0.0f64; b * s * d];
            let mut gb = vec![0.0f64; b * s * n];
            let mut gc = vec![0.0f64; b * s * n];
            let mut ga = vec![0.0f64; d * n];
            let mut gskip = vec![0.0f64; d];
            let mut gh = vec![0.0f64; d * n];
            for bi in 0..b {
                gh.fill(0.0);
                for t in (0..s).rev() {
                    let row = (bi * s + t) * d;
                    let nrow = (bi * s + t) * n;
                    let base = (bi * s + t) * d * n;
                    let next = if t + 1 < s {
                        Some((bi * s + t + 1) * d * n)
                    } else {
                        None
                    };
                    let prev = t.checked_sub(1).map(|tp| (bi * s + tp) * d * n);
                    for di in 0..d {
                        let gy = go[row + di];
                        let dt = vdelta[row + di];
                        let ut = vu[row + di];
                        gskip[di] += gy * ut;
                        gu[row + di] += gy * vskip[di];
                        let arow = &va[di * n..(di + 1) * n];
                        let mut gd_acc = 0.0f64;
                        let mut gu_acc = 0.0f64;
                        for ni in 0..n {
                            let hv = h_all[base + di * n + ni];
                            gc[nrow + ni] += gy * hv;
                            // adjoint of h_t: direct via y_t plus carry from t+1
                            let carry = next
                                .map_or(0.0, |nx| abar[nx + di * n + ni] * gh[di * n + ni]);
                            let g = gy * vc[nrow + ni] + carry;
                            let hp = prev.map_or(0.0, |p| h_all[p + di * n + ni]);
                            let ab = abar[base + di * n + ni];
                            let gab = g * hp;
                            ga[di * n + ni] += gab * dt * ab;
                            gd_acc += gab * arow[ni] * ab + g * vb[nrow + ni] * ut;
                            gb[nrow + ni] += g * dt * ut;
                            gu_acc += g * dt * vb[nrow + ni];
                            gh[di * n + ni] = g;
                        }
                        gdelta[row + di] += gd_acc;
                        gu[row + di] += gu_acc;
                    }
                }
            }
            let add_into = |acc: &mut [f64], src: &[f64]| {
                for (dst, v) in acc.iter_mut().zip(src) {
                    *dst += v;
                }
            };
            add_into(store.acc(u.0, b * s * d), &gu);
            add_into(store.acc(delta.0, b * s * d), &gdelta);
            add_into(store.acc(b_sel.0, b * s * n), &gb);
            add_into(store.acc(c_sel.0, b * s * n), &gc);
            add_into(store.acc(a.0, d * n), &ga);
            add_into(store.acc(skip.0, d), &gskip);
        };
        Ok(self.push(vec![b, s, d], y, Some(Box::new(back))))
    }
}
