//! Scaling benchmark of candidate counts and TAN cost against window size.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::lattice::{candidate_count, LatticeGeometry, MapKind};
use crate::model::{Extractor, Model, ModelConfig};
use crate::numerics::{uniform, Graph};

pub const MIN_REPEATS: usize = 5;
pub const MIN_POINTS: usize = 5;
/// Required ratio between the largest and smallest N.
pub const MIN_SPAN: usize = 8;

pub const CSV_HEADER: &str = "geometry,N,full_grid,valid,macs,wall_ms_med,workset_values";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub geometries: Vec<MapKind>,
    pub ns: Vec<usize>,
    pub repeats: usize,
    pub anchors: usize,
    pub scales: usize,
    pub kappa: usize,
    pub layers: usize,
    /// Channel width of the fused maps.
    pub width: usize,
    pub seed: u64,
    /// Skip timing and report counts only.
    pub counts_only: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            geometries: vec![MapKind::DenseSingle, MapKind::SparseSingle, MapKind::SparseMulti],
            ns: vec![64, 128, 256, 512, 1024],
            repeats: MIN_REPEATS,
            anchors: 8,
            scales: 3,
            kappa: 3,
            layers: 2,
            width: 4,
            seed: 0,
            counts_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub geometry: MapKind,
    pub n: usize,
    pub full_grid: usize,
    pub valid: usize,
    pub macs: usize,
    pub wall_ms_med: f64,
    pub workset_values: usize,
}

/// Least-squares slope of `ln y` against `ln x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Half-width of the 95% confidence interval of the slope.
    pub ci95: f64,
    pub points: usize,
}

impl SlopeFit {
    pub fn contains(&self, value: f64) -> bool {
        (self.slope - value).abs() <= self.ci95
    }
}

pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("{} x values and {} y values", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::InvalidArgument("a slope with a confidence interval needs 3 points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidArgument("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("x values are all equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let dof = n - 2.0;
    let se = (sse / dof / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(SlopeFit {
        slope,
        intercept,
        ci95: t * se,
        points: xs.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometrySlopes {
    pub geometry: MapKind,
    pub full_grid: SlopeFit,
    pub valid: SlopeFit,
    pub macs: SlopeFit,
    /// `None` when timing was skipped.
    pub wall: Option<SlopeFit>,
    pub workset: SlopeFit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub slopes: Vec<GeometrySlopes>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.4},{}",
                r.geometry.name(),
                r.n,
                r.full_grid,
                r.valid,
                r.macs,
                r.wall_ms_med,
                r.workset_values
            );
        }
        s
    }

    /// One row per geometry and measured quantity.
    pub fn slopes_csv(&self) -> String {
        let mut s = String::from("geometry,quantity,slope,ci95,points\n");
        for g in &self.slopes {
            let mut fits = vec![("full_grid", g.full_grid), ("valid", g.valid), ("macs", g.macs)];
            if let Some(w) = g.wall {
                fits.push(("wall_ms_med", w));
            }
            fits.push(("workset_values", g.workset));
            for (q, f) in fits {
                let _ = writeln!(s, "{},{q},{:.4},{:.4},{}", g.geometry.name(), f.slope, f.ci95, f.points);
            }
        }
        s
    }

    pub fn slopes_for(&self, geometry: MapKind) -> Option<&GeometrySlopes> {
        self.slopes.iter().find(|s| s.geometry == geometry)
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn tan_model(cfg: &BenchConfig, kind: MapKind, n: usize) -> Result<Model<f32>> {
    Model::new(ModelConfig {
        hidden: 1,
        n,
        scales: cfg.scales,
        anchors: cfg.anchors,
        kappa: cfg.kappa,
        layers: cfg.layers,
        d_v: 1,
        d_f: cfg.width,
        d_s: 1,
        d_raw: 1,
        vocab: 1,
        lstm_layers: 1,
        extractor: Extractor::Pool,
        map: kind,
        seed: cfg.seed,
        ..ModelConfig::default()
    })
}

/// Runs every geometry at every N. Counts come straight from the lattice
/// module; cost figures come from a forward pass of the gated convolution
/// stacks on random fused maps.
pub fn bench_scaling(cfg: &BenchConfig) -> Result<BenchReport> {
    let mut ns = cfg.ns.clone();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < MIN_POINTS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_POINTS} distinct N values, got {}",
            ns.len()
        )));
    }
    if ns[0] == 0 || ns[ns.len() - 1] < MIN_SPAN * ns[0] {
        return Err(Error::InvalidArgument(format!(
            "N values must span at least {MIN_SPAN}x, got {}..{}",
            ns[0],
            ns[ns.len() - 1]
        )));
    }
    if cfg.repeats < MIN_REPEATS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_REPEATS} repeats, got {}",
            cfg.repeats
        )));
    }
    if cfg.geometries.is_empty() {
        return Err(Error::Empty("no geometries to benchmark".into()));
    }
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for &kind in &cfg.geometries {
        let first = rows.len();
        for &n in &ns {
            let geometry = LatticeGeometry::new(kind, n, cfg.anchors, cfg.scales)?;
            let counts = candidate_count(&geometry);
            let model = tan_model(cfg, kind, n)?;
            let masks = model.masks(&[n]);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let inputs: Vec<_> = model
                .layouts()
                .iter()
                .map(|l| uniform::<f32, _>(&[1, cfg.width, l.rows, l.cols], 1.0, &mut rng))
                .collect();
            let run = || -> Result<(usize, usize)> {
                let mut g = Graph::new();
                let vars: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
                model.tan_forward(&mut g, &vars, &masks)?;
                Ok((g.macs(), g.total_values()))
            };
            let (macs, workset) = run()?;
            let wall_ms_med = if cfg.counts_only {
                0.0
            } else {
                let mut times = Vec::with_capacity(cfg.repeats);
                for _ in 0..cfg.repeats {
                    let t = Instant::now();
                    run()?;
                    times.push(t.elapsed().as_secs_f64() * 1e3);
                }
                median(&mut times)
            };
            rows.push(BenchRow {
                geometry: kind,
                n,
                full_grid: counts.full_grid,
                valid: counts.valid,
                macs,
                wall_ms_med,
                workset_values: workset,
            });
        }
        let rs = &rows[first..];
        let x: Vec<f64> = rs.iter().map(|r| r.n as f64).collect();
        let fit = |f: &dyn Fn(&BenchRow) -> f64| loglog_slope(&x, &rs.iter().map(f).collect::<Vec<_>>());
        slopes.push(GeometrySlopes {
            geometry: kind,
            full_grid: fit(&|r| r.full_grid as f64)?,
            valid: fit(&|r| r.valid as f64)?,
            macs: fit(&|r| r.macs as f64)?,
            wall: if cfg.counts_only {
                None
            } else {
                Some(fit(&|r| r.wall_ms_med)?)
            },
            workset: fit(&|r| r.workset_values as f64)?,
        });
    }
    Ok(BenchReport { rows, slopes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law_is_exact() {
        let x = [2.0, 4.0, 8.0, 16.0, 32.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        let f = loglog_slope(&x, &y).unwrap();
        assert!((f.slope - 1.5).abs() < 1e-12 && f.ci95 < 1e-9);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn slope_ci_widens_with_noise() {
        let x = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0];
        let y = [1.0, 2.3, 3.7, 8.9, 15.0, 35.0];
        let f = loglog_slope(&x, &y).unwrap();
        assert!(f.ci95 > 0.01 && f.contains(f.slope));
        assert!(loglog_slope(&x[..2], &y[..2]).is_err());
        assert!(loglog_slope(&[1.0, 2.0, 0.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn count_slopes() {
        let cfg = BenchConfig {
            counts_only: true,
            ns: vec![16, 32, 64, 128, 256],
            ..BenchConfig::default()
        };
        let r = bench_scaling(&cfg).unwrap();
        assert_eq!(r.rows.len(), 15);
        let dense = r.slopes_for(MapKind::DenseSingle).unwrap();
        assert!((dense.full_grid.slope - 2.0).abs() < 0.03);
        let multi = r.slopes_for(MapKind::SparseMulti).unwrap();
        assert!((multi.full_grid.slope - 1.0).abs() < 1e-12);
        assert!(multi.wall.is_none());
        assert!(r.to_csv().starts_with(CSV_HEADER));
        assert_eq!(r.to_csv().lines().count(), 16);
        for row in &r.rows {
            let c = candidate_count(&LatticeGeometry::new(row.geometry, row.n, 8, 3).unwrap());
            assert_eq!((row.full_grid, row.valid), (c.full_grid, c.valid));
        }
    }

    #[test]
    fn rejects_thin_sweeps() {
        let few = BenchConfig {
            ns: vec![8, 16, 32, 64],
            ..BenchConfig::default()
        };
        assert!(bench_scaling(&few).is_err());
        let narrow = BenchConfig {
            ns: vec![64, 72, 80, 96, 128],
            ..BenchConfig::default()
        };
        assert!(bench_scaling(&narrow).is_err());
        let quick = BenchConfig {
            repeats: 4,
            ..BenchConfig::default()
        };
        assert!(bench_scaling(&quick).is_err());
    }
}
