//! Operation counts and wall-clock scaling of Hadamard attention against
//! quadratic softmax attention.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{hpsa, mkoi_group_widths, mkoi_kernel_size, vanilla_sa_forward, AttentionKernel, MkoiParams, QkvTriple};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::near_square;
use crate::seeded_rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Hpsa,
    VanillaSa,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Hpsa => "hpsa",
            Method::VanillaSa => "vanilla_sa",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub method: Method,
    pub n: usize,
    pub c: usize,
    pub flops: u64,
    pub wall_ns: u64,
}

/// Multiply-adds of one HPSA call on `n` tokens with `c` channels: channel
/// normalisation of Q and K, their product, the `c -> 7c/4` expansion, the
/// three value convolutions, kernel and product on each group, and the fuse.
pub fn hpsa_flops(c: usize, n: usize) -> u64 {
    let (c, n) = (c as u64, n as u64);
    let wide: u64 = mkoi_group_widths(c as usize).iter().sum::<usize>() as u64;
    let normalise = 2 * 2 * c * n;
    let product = c * n;
    let expand = wide * c * n;
    let branches: u64 = mkoi_group_widths(c as usize)
        .iter()
        .enumerate()
        .map(|(m, &w)| w as u64 * c * (mkoi_kernel_size(m) as u64).pow(2) * n)
        .sum();
    let interact = 2 * wide * n;
    let fuse = c * wide * n;
    normalise + product + expand + branches + interact + fuse
}

/// Multiply-adds of multi-head softmax attention: `Q Kᵀ`, the softmax over
/// each row and the weighted sum of values.
pub fn vanilla_sa_flops(c: usize, n: usize, heads: usize) -> u64 {
    let (c, n, heads) = (c as u64, n as u64, heads as u64);
    2 * c * n * n + heads * n * n
}

pub fn flops(method: Method, c: usize, n: usize) -> u64 {
    match method {
        Method::Hpsa => hpsa_flops(c, n),
        Method::VanillaSa => vanilla_sa_flops(c, n, 1),
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|&v| v <= 0.0) {
        return Err(Error::arg("log_log_slope", "needs at least two positive pairs"));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let k = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / k, ly.iter().sum::<f64>() / k);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingResult {
    pub records: Vec<BenchRecord>,
    pub flop_slope: f64,
    pub wall_slope: f64,
}

fn median(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    v[v.len() / 2]
}

/// Counts and times `method` at each size on the calling thread. Timing runs
/// the forward pass only, `reps` times, and keeps the median.
pub fn scaling_bench(method: Method, sizes: &[usize], c: usize, reps: usize, seed: u64) -> Result<ScalingResult> {
    if sizes.len() < 4 || sizes.windows(2).any(|p| p[0] >= p[1]) || sizes[0] == 0 {
        return Err(Error::arg("scaling_bench", "sizes must be at least 4 strictly increasing positive values"));
    }
    if reps == 0 || c == 0 || c % 4 != 0 {
        return Err(Error::arg("scaling_bench", "reps must be positive and c a positive multiple of 4"));
    }
    let mut rng = seeded_rng(seed);
    let params = MkoiParams::new(c, AttentionKernel::Dak, &mut rng)?;
    let mut records = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let (h, w) = near_square(n);
        let [q, k, v] = [(); 3].map(|_| Tensor::randn([c, h, w], &mut rng));
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let start = Instant::now();
            match method {
                Method::Hpsa => {
                    let mut g = Graph::inference();
                    let t = QkvTriple {
                        q: g.input(q.clone()),
                        k: g.input(k.clone()),
                        v: g.input(v.clone()),
                    };
                    std::hint::black_box(hpsa(&mut g, &t, &params)?);
                }
                Method::VanillaSa => {
                    std::hint::black_box(vanilla_sa_forward(&q, &k, &v, 1)?);
                }
            }
            times.push((start.elapsed().as_nanos() as u64).max(1));
        }
        records.push(BenchRecord {
            method,
            n,
            c,
            flops: flops(method, c, n),
            wall_ns: median(times),
        });
    }
    let xs: Vec<f64> = records.iter().map(|r| r.n as f64).collect();
    let fl: Vec<f64> = records.iter().map(|r| r.flops as f64).collect();
    let wl: Vec<f64> = records.iter().map(|r| r.wall_ns as f64).collect();
    Ok(ScalingResult {
        flop_slope: log_log_slope(&xs, &fl)?,
        wall_slope: log_log_slope(&xs, &wl)?,
        records,
    })
}

/// CSV with header `method,n,c,flops,wall_ns`.
pub fn write_bench_csv(records: &[BenchRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_bench_csv(path: &Path) -> Result<Vec<BenchRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hpsa_flops_double_with_n() {
        for c in [4, 16, 32] {
            for n in [64, 100, 1024] {
                assert_eq!(hpsa_flops(c, 2 * n), 2 * hpsa_flops(c, n));
            }
        }
    }

    #[test]
    fn vanilla_flops_quadruple_with_n() {
        for n in [64, 100, 1024] {
            assert_eq!(vanilla_sa_flops(32, 2 * n, 1), 4 * vanilla_sa_flops(32, n, 1));
        }
    }

    #[test]
    fn hpsa_count_matches_hand_total_at_c4() {
        // c = 4: widths (4, 2, 1), 7 expanded channels.
        // 16 + 4 + 28 + (4·4·9 + 2·4·25 + 1·4·49) + 14 + 28 per token.
        let per_token = 16 + 4 + 28 + (144 + 200 + 196) + 14 + 28;
        assert_eq!(hpsa_flops(4, 10), 10 * per_token);
    }

    #[test]
    fn slope_fit_recovers_power_laws() {
        let xs = [64.0, 256.0, 1024.0, 4096.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((log_log_slope(&xs, &ys).unwrap() - 1.5).abs() < 1e-12);
        assert!(log_log_slope(&xs, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn analytic_slopes_on_default_sizes() {
        let sizes = [64usize, 256, 1024, 4096];
        let xs: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
        let slope = |m| {
            let ys: Vec<f64> = sizes.iter().map(|&n| flops(m, 32, n) as f64).collect();
            log_log_slope(&xs, &ys).unwrap()
        };
        assert!((slope(Method::Hpsa) - 1.0).abs() < 1e-12);
        assert!((slope(Method::VanillaSa) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bench_records_and_csv_round_trip() {
        let res = scaling_bench(Method::Hpsa, &[16, 36, 64, 100], 4, 1, 1).unwrap();
        assert_eq!(res.records.len(), 4);
        assert!(res.records.iter().all(|r| r.flops > 0 && r.wall_ns > 0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        write_bench_csv(&res.records, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("method,n,c,flops,wall_ns\nhpsa,16,4,"));
        assert_eq!(read_bench_csv(&path).unwrap(), res.records);
    }

    #[test]
    fn bench_rejects_bad_sizes() {
        assert!(scaling_bench(Method::Hpsa, &[16, 36, 64], 4, 1, 1).is_err());
        assert!(scaling_bench(Method::Hpsa, &[16, 64, 36, 100], 4, 1, 1).is_err());
        assert!(scaling_bench(Method::VanillaSa, &[16, 36, 64, 100], 6, 1, 1).is_err());
    }

    #[test]
    fn flop_counts_are_reproducible() {
        let a = scaling_bench(Method::VanillaSa, &[4, 9, 16, 25], 4, 1, 2).unwrap();
        let b = scaling_bench(Method::VanillaSa, &[4, 9, 16, 25], 4, 1, 2).unwrap();
        let strip = |r: &ScalingResult| r.records.iter().map(|x| (x.n, x.flops)).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.flop_slope, b.flop_slope);
    }
}
