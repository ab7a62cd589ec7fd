//! Displacement and map-compliance metrics.
//!
//! `ORD` is the distance from a predicted point to the drivable region
//! (zero inside, boundary included). `ORFP` counts predicted points that
//! are off-road (`ORD > 0`) at indices where the ground truth is on-road.
//! Over an evaluation set ORFP is pooled: total off-road count divided by
//! total eligible count, so examples weigh in proportion to their eligible
//! points. Examples whose drivable region is empty are left out of ORD and
//! ORFP and counted separately.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist, Point};
use crate::scene::region::DrivableRegion;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Displacement {
    pub ade: f64,
    pub fde: f64,
}

fn aligned(pred: &[Point], gt: &[Point]) -> Result<()> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::shape(
            "ade_fde",
            format!("prediction has {} points, ground truth {}", pred.len(), gt.len()),
        ));
    }
    Ok(())
}

pub fn pointwise_errors(pred: &[Point], gt: &[Point]) -> Result<Vec<f64>> {
    aligned(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(&p, &g)| dist(p, g)).collect())
}

pub fn ade_fde(pred: &[Point], gt: &[Point]) -> Result<Displacement> {
    let e = pointwise_errors(pred, gt)?;
    Ok(Displacement {
        ade: e.iter().sum::<f64>() / e.len() as f64,
        fde: *e.last().unwrap(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reducer {
    Mean,
    Min,
}

impl Reducer {
    pub fn name(self) -> &'static str {
        match self {
            Reducer::Mean => "mean",
            Reducer::Min => "min",
        }
    }

    pub fn apply(self, xs: impl IntoIterator<Item = f64>) -> f64 {
        let mut n = 0usize;
        let mut acc = match self {
            Reducer::Mean => 0.0,
            Reducer::Min => f64::INFINITY,
        };
        for x in xs {
            n += 1;
            acc = match self {
                Reducer::Mean => acc + x,
                Reducer::Min => acc.min(x),
            };
        }
        match self {
            Reducer::Mean => acc / n as f64,
            Reducer::Min => acc,
        }
    }
}

/// ADE and FDE over `K` samples; the reducer is applied to each independently.
pub fn over_k(samples: &[Vec<Point>], gt: &[Point], reducer: Reducer) -> Result<Displacement> {
    if samples.is_empty() {
        return Err(Error::Contract("over_k needs at least one sample".into()));
    }
    let per = samples
        .iter()
        .map(|s| ade_fde(s, gt))
        .collect::<Result<Vec<_>>>()?;
    Ok(Displacement {
        ade: reducer.apply(per.iter().map(|d| d.ade)),
        fde: reducer.apply(per.iter().map(|d| d.fde)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ord {
    pub per_point: Vec<f64>,
    pub avg: f64,
    pub at_final: f64,
}

/// `None` when the region is empty.
pub fn ord(traj: &[Point], region: &DrivableRegion) -> Option<Ord> {
    if region.is_empty() || traj.is_empty() {
        return None;
    }
    let per_point: Vec<f64> = traj
        .iter()
        .map(|&p| region.distance(p).expect("non-empty region"))
        .collect();
    Some(Ord {
        avg: per_point.iter().sum::<f64>() / per_point.len() as f64,
        at_final: *per_point.last().unwrap(),
        per_point,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orfp {
    pub off_road: usize,
    /// Ground-truth points inside the region.
    pub eligible: usize,
    pub final_off_road: bool,
    pub final_eligible: bool,
}

impl Orfp {
    pub fn percent(&self) -> f64 {
        100.0 * self.off_road as f64 / self.eligible as f64
    }
}

/// `None` when the region is empty or no ground-truth point is in it.
pub fn orfp(traj: &[Point], gt: &[Point], region: &DrivableRegion) -> Result<Option<Orfp>> {
    aligned(traj, gt)?;
    if region.is_empty() {
        return Ok(None);
    }
    let mut r = Orfp {
        off_road: 0,
        eligible: 0,
        final_off_road: false,
        final_eligible: false,
    };
    let last = gt.len() - 1;
    for (k, (&p, &g)) in traj.iter().zip(gt).enumerate() {
        if !region.contains(g) {
            continue;
        }
        let off = region.distance(p).expect("non-empty region") > 0.0;
        r.eligible += 1;
        r.off_road += off as usize;
        if k == last {
            r.final_eligible = true;
            r.final_off_road = off;
        }
    }
    Ok((r.eligible > 0).then_some(r))
}

/// Predictions for one example: `samples[k]` is the k-th draw.
pub struct Example<'a> {
    pub samples: &'a [Vec<Point>],
    pub gt: &'a [Point],
    pub region: &'a DrivableRegion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub k: usize,
    pub reducer: Reducer,
    pub ade: f64,
    pub fde: f64,
    /// Displacement error at each horizon point.
    pub ade_per_horizon: Vec<f64>,
    pub ord_avg: f64,
    pub ord_final: f64,
    /// Percentages in `[0, 100]`.
    pub orfp_avg: f64,
    pub orfp_final: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_examples: usize,
    /// Examples with an empty drivable region.
    pub n_region_excluded: usize,
    /// Examples whose ground truth never enters the region.
    pub n_orfp_excluded: usize,
    pub rows: Vec<MetricsRow>,
}

pub const CSV_HEADER: &str =
    "k,reducer,ade,fde,ord_avg,ord_4s,orfp_avg,orfp_4s,n_examples,n_region_excluded,n_orfp_excluded";

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

impl MetricsReport {
    /// Uses the first `k` samples of every example for each `k` in `ks`,
    /// so larger `k` always evaluate a superset.
    pub fn evaluate(examples: &[Example<'_>], ks: &[usize]) -> Result<MetricsReport> {
        let kmax = ks.iter().copied().max().unwrap_or(0);
        if ks.contains(&0) {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if let Some(e) = examples.iter().find(|e| e.samples.len() < kmax) {
            return Err(Error::Contract(format!(
                "example has {} samples, K up to {kmax} requested",
                e.samples.len()
            )));
        }
        let t = examples.first().map_or(0, |e| e.gt.len());
        // per example, per sample: point errors, ORD, ORFP
        let mut errs = Vec::with_capacity(examples.len());
        let mut ords = Vec::with_capacity(examples.len());
        let mut orfps = Vec::with_capacity(examples.len());
        for e in examples {
            let s = &e.samples[..kmax];
            errs.push(
                s.iter()
                    .map(|p| pointwise_errors(p, e.gt))
                    .collect::<Result<Vec<_>>>()?,
            );
            ords.push(
                s.iter()
                    .map(|p| ord(p, e.region))
                    .collect::<Option<Vec<_>>>(),
            );
            orfps.push(
                s.iter()
                    .map(|p| orfp(p, e.gt, e.region))
                    .collect::<Result<Option<Vec<_>>>>()?,
            );
        }
        let mut rows = Vec::new();
        for &k in ks {
            for reducer in [Reducer::Mean, Reducer::Min] {
                let mut ade = Vec::new();
                let mut fde = Vec::new();
                let mut horizon = vec![Vec::new(); t];
                for per in &errs {
                    let per = &per[..k];
                    let n = per[0].len();
                    ade.push(reducer.apply(per.iter().map(|e| e.iter().sum::<f64>() / n as f64)));
                    fde.push(reducer.apply(per.iter().map(|e| e[n - 1])));
                    for (h, col) in horizon.iter_mut().enumerate() {
                        col.push(reducer.apply(per.iter().map(|e| e[h])));
                    }
                }
                let (mut oa, mut of) = (Vec::new(), Vec::new());
                for o in ords.iter().flatten() {
                    let o = &o[..k];
                    oa.push(reducer.apply(o.iter().map(|x| x.avg)));
                    of.push(reducer.apply(o.iter().map(|x| x.at_final)));
                }
                let (mut off, mut elig, mut off_f, mut elig_f) = (0.0, 0.0, 0.0, 0.0);
                for o in orfps.iter().flatten() {
                    let o = &o[..k];
                    off += reducer.apply(o.iter().map(|x| x.off_road as f64));
                    elig += o[0].eligible as f64;
                    if o[0].final_eligible {
                        off_f += reducer.apply(o.iter().map(|x| x.final_off_road as u8 as f64));
                        elig_f += 1.0;
                    }
                }
                let pct = |a: f64, b: f64| if b > 0.0 { 100.0 * a / b } else { f64::NAN };
                rows.push(MetricsRow {
                    k,
                    reducer,
                    ade: mean(&ade),
                    fde: mean(&fde),
                    ade_per_horizon: horizon.iter().map(|c| mean(c)).collect(),
                    ord_avg: mean(&oa),
                    ord_final: mean(&of),
                    orfp_avg: pct(off, elig),
                    orfp_final: pct(off_f, elig_f),
                });
            }
        }
        Ok(MetricsReport {
            n_examples: examples.len(),
            n_region_excluded: ords.iter().filter(|o| o.is_none()).count(),
            n_orfp_excluded: orfps.iter().filter(|o| o.is_none()).count(),
            rows,
        })
    }

    pub fn row(&self, k: usize, reducer: Reducer) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.k == k && r.reducer == reducer)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.k,
                r.reducer.name(),
                r.ade,
                r.fde,
                r.ord_avg,
                r.ord_final,
                r.orfp_avg,
                r.orfp_final,
                self.n_examples,
                self.n_region_excluded,
                self.n_orfp_excluded
            ));
        }
        s
    }

    /// Human-readable table: one line per (reducer, K).
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9}\n",
            "", "ADE", "FDE@4s", "ORD", "ORD@4s", "ORFP%", "ORFP%@4s"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<12} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>9.2} {:>9.2}\n",
                format!("{} over {}", r.reducer.name(), r.k),
                r.ade,
                r.fde,
                r.ord_avg,
                r.ord_final,
                r.orfp_avg,
                r.orfp_final
            ));
        }
        s.push_str(&format!(
            "examples: {}  empty region: {}  no on-road ground truth: {}\n",
            self.n_examples, self.n_region_excluded, self.n_orfp_excluded
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::buffer_polyline;

    fn line(f: impl Fn(usize) -> Point) -> Vec<Point> {
        (1..=8).map(f).collect()
    }

    fn corridor() -> DrivableRegion {
        DrivableRegion {
            lanes: vec![0],
            polygons: vec![buffer_polyline(&[[-10.0, 0.0], [100.0, 0.0]], 1.75)],
        }
    }

    #[test]
    fn displacement_examples() {
        let gt = line(|k| [k as f64 * 5.0, 0.0]);
        assert_eq!(ade_fde(&gt, &gt).unwrap(), Displacement { ade: 0.0, fde: 0.0 });
        let shifted = line(|k| [k as f64 * 5.0, 1.0]);
        assert_eq!(ade_fde(&shifted, &gt).unwrap(), Displacement { ade: 1.0, fde: 1.0 });
        let drift = line(|k| [k as f64 * 5.0, 0.25 * k as f64]);
        let d = ade_fde(&drift, &gt).unwrap();
        assert!((d.ade - 1.125).abs() < 1e-12 && (d.fde - 2.0).abs() < 1e-12);
        assert!(ade_fde(&drift[..7], &gt).is_err());
    }

    #[test]
    fn over_k_examples() {
        let gt = line(|k| [k as f64, 0.0]);
        let far = line(|k| [k as f64, 5.0]);
        let s = vec![gt.clone(), far];
        let min = over_k(&s, &gt, Reducer::Min).unwrap();
        let mean = over_k(&s, &gt, Reducer::Mean).unwrap();
        assert_eq!(min.ade, 0.0);
        assert!((mean.ade - 2.5).abs() < 1e-12);
        let one = over_k(&s[..1], &gt, Reducer::Mean).unwrap();
        assert_eq!(one, ade_fde(&gt, &gt).unwrap());
    }

    #[test]
    fn ord_and_orfp_examples() {
        let r = corridor();
        let gt = line(|k| [k as f64 * 5.0, 0.0]);
        assert_eq!(ord(&gt, &r).unwrap().avg, 0.0);
        let o = ord(&[[20.0, 3.75]], &r).unwrap();
        assert!((o.avg - 2.0).abs() < 1e-12);
        assert_eq!(ord(&[[20.0, 1.75]], &r).unwrap().avg, 0.0);
        assert_eq!(orfp(&gt, &gt, &r).unwrap().unwrap().percent(), 0.0);
        let mut pred = gt.clone();
        pred[2][1] = 4.0;
        pred[7][1] = -4.0;
        let f = orfp(&pred, &gt, &r).unwrap().unwrap();
        assert_eq!(f.percent(), 25.0);
        assert!(f.final_off_road);
        let off = line(|k| [k as f64, 30.0]);
        assert_eq!(orfp(&pred, &off, &r).unwrap(), None);
        assert!(ord(&gt, &DrivableRegion::default()).is_none());
    }

    #[test]
    fn report_orderings() {
        let r = corridor();
        let gt = line(|k| [k as f64 * 5.0, 0.0]);
        let samples: Vec<Vec<Point>> = (0..20)
            .map(|s| line(|k| [k as f64 * 5.0, (s as f64 - 7.0) * 0.4]))
            .collect();
        let ex = [Example {
            samples: &samples,
            gt: &gt,
            region: &r,
        }];
        let rep = MetricsReport::evaluate(&ex, &[1, 3, 20]).unwrap();
        for k in [1, 3, 20] {
            let (mn, me) = (rep.row(k, Reducer::Min).unwrap(), rep.row(k, Reducer::Mean).unwrap());
            assert!(mn.ade <= me.ade && mn.fde <= me.fde);
            assert!((0.0..=100.0).contains(&me.orfp_avg));
        }
        let k1 = (rep.row(1, Reducer::Min).unwrap(), rep.row(1, Reducer::Mean).unwrap());
        assert_eq!(k1.0.ade, k1.1.ade);
        assert!(rep.row(20, Reducer::Min).unwrap().ade <= rep.row(3, Reducer::Min).unwrap().ade);
        assert_eq!(rep.to_csv().lines().count(), 7);
        assert!(rep.to_csv().starts_with(CSV_HEADER));
    }
}
