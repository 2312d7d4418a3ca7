//! Analytic FLOPs and peak-activation-memory model.
//!
//! Multiply-accumulates count as two floating-point operations. The scan
//! term reuses [`crate::ops::scan_flops`], the exact per-operation count of
//! the sequential scan implementation, so the model stays honest against
//! instrumentation. Sequence length S means patches per channel throughout.

use crate::ops::scan_flops;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Family {
    /// Channel-unified latents + linear-time selective scans.
    SsmUnified,
    /// Channel-unified latents + full self-attention over the S axis.
    AttentionPerToken,
    /// Joint attention over the flattened (S * C) token grid.
    AttentionFlattened,
}

impl Family {
    pub fn parse(s: &str) -> Option<Family> {
        match s {
            "ssm-unified" => Some(Family::SsmUnified),
            "attention-per-token" => Some(Family::AttentionPerToken),
            "attention-flattened" => Some(Family::AttentionFlattened),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::SsmUnified => "ssm-unified",
            Family::AttentionPerToken => "attention-per-token",
            Family::AttentionFlattened => "attention-flattened",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ArchSpec {
    pub name: String,
    pub family: Family,
    pub embed: usize,
    pub queries: usize,
    pub state: usize,
    pub layers: usize,
    pub heads: usize,
    pub channels: usize,
    pub patch_len: usize,
    pub expand: usize,
}

impl ArchSpec {
    /// The model built by this crate, at its default dims.
    pub fn ssm_default(channels: usize) -> ArchSpec {
        ArchSpec {
            name: "ssm-tiny".into(),
            family: Family::SsmUnified,
            embed: 64,
            queries: 4,
            state: 16,
            layers: 2,
            heads: 1,
            channels,
            patch_len: 64,
            expand: 2,
        }
    }

    /// Desk-scale stand-in for a per-token attention baseline.
    pub fn attention_per_token(channels: usize) -> ArchSpec {
        ArchSpec {
            name: "attn-token".into(),
            family: Family::AttentionPerToken,
            embed: 64,
            queries: 4,
            state: 0,
            layers: 2,
            heads: 4,
            channels,
            patch_len: 64,
            expand: 2,
        }
    }

    /// Desk-scale stand-in for a flattened spatio-temporal attention
    /// baseline with O((S*C)^2) pairwise cost.
    pub fn attention_flattened(channels: usize) -> ArchSpec {
        ArchSpec {
            name: "attn-flat".into(),
            family: Family::AttentionFlattened,
            embed: 64,
            queries: 4,
            state: 0,
            layers: 2,
            heads: 4,
            channels,
            patch_len: 64,
            expand: 2,
        }
    }

    /// Rough parameter memory, bytes (f32).
    fn param_bytes(&self) -> u64 {
        let e = self.embed as u64;
        let layers = self.layers as u64;
        // order-of-magnitude resident weights: projections per layer + patch embed
        let per_layer = match self.family {
            Family::SsmUnified => {
                let d = (self.queries as u64) * e;
                let di = (self.expand as u64) * d;
                2 * (d * 2 * di + di * d + di * (self.state as u64 * 2 + 16))
            }
            _ => 12 * e * e,
        };
        4 * (per_layer * layers + (self.patch_len as u64) * e + e * e * 4)
    }
}

/// Per-component FLOP counts at one sequence length.
#[derive(Clone, Debug)]
pub struct FlopsProfile {
    pub seq: usize,
    /// (component name, flops), fixed component set per family.
    pub components: Vec<(&'static str, u64)>,
    pub total: u64,
    pub peak_mem_bytes: u64,
}

/// Counts one forward pass at batch 1, sequence length `s` (patches per
/// channel).
pub fn count_flops(spec: &ArchSpec, s: usize) -> FlopsProfile {
    let e = spec.embed as u64;
    let q = spec.queries as u64;
    let c = spec.channels as u64;
    let p = spec.patch_len as u64;
    let su = s as u64;
    let layers = spec.layers as u64;
    let heads = spec.heads as u64;

    // shared front end: patch projection + channel unification
    let tokenize = 2 * su * c * p * e;
    let unify = 4 * su * c * q * e;

    let mut components: Vec<(&'static str, u64)> = vec![("tokenize", tokenize), ("unify", unify)];
    let mut peak_act: u64;

    match spec.family {
        Family::SsmUnified => {
            let d = q * e;
            let di = (spec.expand as u64) * d;
            // two directions per block
            let scan = layers * 2 * scan_flops(s, di as usize, spec.state);
            let proj = layers
                * 2
                * (2 * su * d * 2 * di   // input projection (x and gate)
                    + 2 * su * di * (16 + 2 * spec.state as u64) // selection projection
                    + 2 * su * di * d); // output projection
            components.push(("scan", scan));
            components.push(("proj", proj));
            // backward stores the scan states: S x d_inner x N
            peak_act = 4 * su * di * (spec.state as u64);
            peak_act = peak_act.max(4 * su * c * e);
        }
        Family::AttentionPerToken => {
            let d = q * e;
            // heads split the width; total pairwise cost is unchanged
            let attn = layers * 4 * su * su * d;
            let proj = layers * (8 * su * d * d + 16 * su * d * d); // qkvo + mlp(4x)
            components.push(("attn", attn));
            components.push(("proj", proj));
            peak_act = 4 * heads * su * su;
            peak_act = peak_act.max(4 * su * c * e);
        }
        Family::AttentionFlattened => {
            let tokens = su * c;
            let attn = layers * 4 * tokens * tokens * e;
            let proj = layers * (8 * tokens * e * e + 16 * tokens * e * e);
            components.push(("attn", attn));
            components.push(("proj", proj));
            peak_act = 4 * heads * tokens * tokens;
            peak_act = peak_act.max(4 * tokens * e);
        }
    }

    let total = components.iter().map(|(_, f)| f).sum();
    FlopsProfile {
        seq: s,
        components,
        total,
        peak_mem_bytes: spec.param_bytes() + peak_act,
    }
}

/// Largest S (doubling search up to 2^40) whose peak-memory estimate stays
/// within `budget_bytes`.
pub fn memory_crossing(spec: &ArchSpec, budget_bytes: u64) -> u64 {
    let mut last_ok = 0u64;
    let mut s = 1u64;
    while s <= 1 << 40 {
        if count_flops(spec, s as usize).peak_mem_bytes <= budget_bytes {
            last_ok = s;
        } else {
            break;
        }
        s *= 2;
    }
    // refine between last_ok and 2*last_ok
    if last_ok > 0 {
        let (mut lo, mut hi) = (last_ok, last_ok * 2);
        while lo + 1 < hi {
            let mid = lo + (hi - lo) / 2;
            if count_flops(spec, mid as usize).peak_mem_bytes <= budget_bytes {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        last_ok = lo;
    }
    last_ok
}

pub const DEFAULT_MEM_BUDGET: u64 = 64 * (1 << 30);

/// Log-spaced sweep over sequence lengths; one CSV row per (spec, S).
pub fn scaling_sweep(specs: &[ArchSpec], s_values: &[usize], budget_bytes: u64) -> String {
    let mut out = String::from(
        "spec,family,S,flops_total,flops_tokenize,flops_unify,flops_scan,flops_proj,flops_attn,peak_mem_bytes,mem_limit_S\n",
    );
    for spec in specs {
        let limit = memory_crossing(spec, budget_bytes);
        for &s in s_values {
            let p = count_flops(spec, s);
            let get = |name: &str| {
                p.components
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, f)| *f)
                    .unwrap_or(0)
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                spec.name,
                spec.family.name(),
                s,
                p.total,
                get("tokenize"),
                get("unify"),
                get("scan"),
                get("proj"),
                get("attn"),
                p.peak_mem_bytes,
                limit,
            ));
        }
    }
    out
}

/// Geometric grid from `lo` to `hi` with about `points_per_decade` points
/// per factor of ten, always including both endpoints.
pub fn log_spaced(lo: usize, hi: usize, points_per_decade: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let lo_f = lo as f64;
    let hi_f = hi as f64;
    let decades = (hi_f / lo_f).log10();
    let n = (decades * points_per_decade as f64).ceil() as usize;
    for i in 0..=n {
        let v = (lo_f * 10f64.powf(decades * i as f64 / n as f64)).round() as usize;
        if out.last() != Some(&v) {
            out.push(v);
        }
    }
    out
}

/// Least-squares slope of log10(flops) against log10(S).
pub fn loglog_slope(points: &[(usize, u64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|&(s, _)| (s as f64).log10()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, f)| (f as f64).log10()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_family_doubles_linearly() {
        let spec = ArchSpec::ssm_default(20);
        for s in [256usize, 1024, 8192] {
            let a = count_flops(&spec, s).total as f64;
            let b = count_flops(&spec, 2 * s).total as f64;
            let ratio = b / a;
            assert!((ratio - 2.0).abs() <= 0.1, "S={s}: ratio {ratio}");
        }
    }

    #[test]
    fn flattened_family_tends_quadratic() {
        let spec = ArchSpec::attention_flattened(20);
        let a = count_flops(&spec, 16384).total as f64;
        let b = count_flops(&spec, 32768).total as f64;
        let ratio = b / a;
        assert!((ratio - 4.0).abs() <= 0.25, "ratio {ratio}");
    }

    #[test]
    fn per_token_attention_vanishes_at_s1() {
        let spec = ArchSpec::attention_per_token(20);
        let p = count_flops(&spec, 1);
        let attn = p.components.iter().find(|(n, _)| *n == "attn").unwrap().1;
        // S=1: only the diagonal pair remains
        assert_eq!(attn, (spec.layers as u64) * 4 * (spec.queries * spec.embed) as u64);
    }

    #[test]
    fn monotone_in_s() {
        for spec in [
            ArchSpec::ssm_default(20),
            ArchSpec::attention_per_token(20),
            ArchSpec::attention_flattened(20),
        ] {
            let mut prev = 0u64;
            for s in log_spaced(64, 65536, 4) {
                let f = count_flops(&spec, s).total;
                assert!(f >= prev);
                prev = f;
            }
        }
    }

    #[test]
    fn csv_row_count() {
        let specs = [ArchSpec::ssm_default(20), ArchSpec::attention_flattened(20)];
        let svals = log_spaced(64, 4096, 3);
        let csv = scaling_sweep(&specs, &svals, DEFAULT_MEM_BUDGET);
        assert_eq!(csv.lines().count(), 1 + specs.len() * svals.len());
    }

    #[test]
    fn memory_crossing_ratio() {
        let ssm = memory_crossing(&ArchSpec::ssm_default(20), DEFAULT_MEM_BUDGET);
        let flat = memory_crossing(&ArchSpec::attention_flattened(20), DEFAULT_MEM_BUDGET);
        assert!(flat > 0);
        assert!(
            ssm as f64 / flat as f64 >= 10.0,
            "ssm limit {ssm} vs flattened {flat}"
        );
    }
}
