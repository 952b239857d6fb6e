//! Agreement metrics between segmentations and the statistics reported over them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Mask3D;

fn check_grids(a: &Mask3D, b: &Mask3D) -> Result<()> {
    if !a.geometry().same_grid(b.geometry()) {
        return Err(Error::Geometry(format!(
            "masks live on different grids ({:?} vs {:?})",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Dice similarity `2|A∩B| / (|A|+|B|)`; two empty masks agree perfectly (1.0).
pub fn dsc(a: &Mask3D, b: &Mask3D) -> Result<f64> {
    check_grids(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (x, y) = (x != 0, y != 0);
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

pub fn volume_mm3(m: &Mask3D) -> f64 {
    m.count() as f64 * m.geometry().voxel_volume()
}

/// Largest in-plane distance (mm) between boundary voxel centres of any
/// single z-slice. Boundary voxels are foreground voxels with an in-plane
/// 4-neighbour that is background or outside the grid.
pub fn max_diameter_transverse(m: &Mask3D) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::EmptyMask);
    }
    let g = m.geometry();
    let [nx, ny, nz] = g.dims;
    let mut best = 0f64;
    let mut boundary = Vec::new();
    for z in 0..nz {
        boundary.clear();
        for y in 0..ny {
            for x in 0..nx {
                if !m.get(x, y, z) {
                    continue;
                }
                let edge = x == 0
                    || y == 0
                    || x + 1 == nx
                    || y + 1 == ny
                    || !m.get(x - 1, y, z)
                    || !m.get(x + 1, y, z)
                    || !m.get(x, y - 1, z)
                    || !m.get(x, y + 1, z);
                if edge {
                    boundary.push([x as f64, y as f64]);
                }
            }
        }
        for i in 0..boundary.len() {
            for j in i + 1..boundary.len() {
                let d = [
                    (boundary[i][0] - boundary[j][0]) * g.spacing[0],
                    (boundary[i][1] - boundary[j][1]) * g.spacing[1],
                    0.0,
                ];
                let w: [f64; 3] = std::array::from_fn(|r| (0..3).map(|c| g.direction[r][c] * d[c]).sum());
                best = best.max(world_distance(&w, &[0.0; 3]));
            }
        }
    }
    Ok(best)
}

pub fn world_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n − 1).
pub fn sample_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

fn check_pairs(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!(
            "paired samples differ in length ({} vs {})",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 pairs".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub loa_lo: f64,
    pub loa_hi: f64,
}

impl BlandAltman {
    fn from_diffs(d: &[f64]) -> Self {
        let mean_diff = mean(d);
        let sd_diff = sample_sd(d);
        BlandAltman {
            mean_diff,
            sd_diff,
            loa_lo: mean_diff - 1.96 * sd_diff,
            loa_hi: mean_diff + 1.96 * sd_diff,
        }
    }
}

/// Differences `xs − ys` with 95% limits of agreement.
pub fn bland_altman(xs: &[f64], ys: &[f64]) -> Result<BlandAltman> {
    check_pairs(xs, ys)?;
    let d: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x - y).collect();
    Ok(BlandAltman::from_diffs(&d))
}

/// Percentage differences `100·(x − y)/((x + y)/2)`.
pub fn percent_diffs(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    xs.iter()
        .zip(ys)
        .map(|(x, y)| 100.0 * (x - y) / ((x + y) / 2.0))
        .collect()
}

pub fn bland_altman_percent(xs: &[f64], ys: &[f64]) -> Result<BlandAltman> {
    check_pairs(xs, ys)?;
    if xs.iter().zip(ys).any(|(x, y)| x + y == 0.0) {
        return Err(Error::InvalidArgument("pair mean is zero; percent difference undefined".into()));
    }
    Ok(BlandAltman::from_diffs(&percent_diffs(xs, ys)))
}

pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pairs(xs, ys)?;
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("zero variance; correlation undefined".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_two_sided: f64,
}

pub fn paired_t_test(xs: &[f64], ys: &[f64]) -> Result<TTest> {
    check_pairs(xs, ys)?;
    let d: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x - y).collect();
    let sd = sample_sd(&d);
    if !(sd > 0.0) {
        return Err(Error::InvalidArgument("differences have zero variance; t-test undefined".into()));
    }
    let n = d.len() as f64;
    let t = mean(&d) / (sd / n.sqrt());
    let df = n - 1.0;
    Ok(TTest {
        t,
        df,
        p_two_sided: student_t_two_sided_p(t, df),
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    regularized_incomplete_beta(df / (df + t * t), df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// Lanczos approximation (g = 7, n = 9) of ln Γ(x) for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `I_x(a, b)` via Lentz's continued fraction, tolerance 1e-10 (absolute on the fraction).
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(1.0 - x, b, a) / b
    }
}

fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const EPS: f64 = 1e-10;
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QualityScore {
    Excellent,
    Sufficient,
    Insufficient,
    Incorrect,
    #[serde(rename = "Cannot locate tumor")]
    CannotLocate,
}

/// Seconds per stage of one interactive segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub annotation: Option<f64>,
    pub preprocessing: Option<f64>,
    pub model_inference: Option<f64>,
    pub postprocessing: Option<f64>,
    pub evaluation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    pub dsc: f64,
    pub volume_pred: f64,
    pub volume_ref: f64,
    pub diameter_pred: Option<f64>,
    pub diameter_ref: Option<f64>,
}

impl CaseMetrics {
    pub fn compute(id: impl Into<String>, pred: &Mask3D, reference: &Mask3D) -> Result<Self> {
        Ok(CaseMetrics {
            id: id.into(),
            dsc: dsc(pred, reference)?,
            volume_pred: volume_mm3(pred),
            volume_ref: volume_mm3(reference),
            diameter_pred: max_diameter_transverse(pred).ok(),
            diameter_ref: max_diameter_transverse(reference).ok(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub bland_altman: BlandAltman,
    pub bland_altman_percent: Option<BlandAltman>,
    pub pearson_r: Option<f64>,
    pub paired_t: Option<TTest>,
}

impl Agreement {
    fn compute(pred: &[f64], reference: &[f64]) -> Option<Self> {
        Some(Agreement {
            bland_altman: bland_altman(pred, reference).ok()?,
            bland_altman_percent: bland_altman_percent(pred, reference).ok(),
            pearson_r: pearson_r(pred, reference).ok(),
            paired_t: paired_t_test(pred, reference).ok(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: Vec<CaseMetrics>,
    pub dsc_mean: f64,
    pub dsc_sd: f64,
    pub volume: Option<Agreement>,
    pub diameter: Option<Agreement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<QualityScore>,
}

impl EvalReport {
    pub fn from_cases(cases: Vec<CaseMetrics>) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::InvalidArgument("no cases to report".into()));
        }
        let d: Vec<f64> = cases.iter().map(|c| c.dsc).collect();
        let vp: Vec<f64> = cases.iter().map(|c| c.volume_pred).collect();
        let vr: Vec<f64> = cases.iter().map(|c| c.volume_ref).collect();
        let (dp, dr): (Vec<f64>, Vec<f64>) = cases
            .iter()
            .filter_map(|c| Some((c.diameter_pred?, c.diameter_ref?)))
            .unzip();
        Ok(EvalReport {
            dsc_mean: mean(&d),
            dsc_sd: if d.len() > 1 { sample_sd(&d) } else { 0.0 },
            volume: Agreement::compute(&vp, &vr),
            diameter: Agreement::compute(&dp, &dr),
            cases,
            timings: None,
            quality: None,
        })
    }

    /// Per-case rows as CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,dsc,volume_pred_mm3,volume_ref_mm3,diameter_pred_mm,diameter_ref_mm\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.cases {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.id,
                c.dsc,
                c.volume_pred,
                c.volume_ref,
                opt(c.diameter_pred),
                opt(c.diameter_ref)
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn line(n: usize, on: impl Fn(usize) -> bool) -> Mask3D {
        Mask3D::from_fn(Geometry::simple([n, 1, 1], [1.0; 3]).unwrap(), |x, _, _| on(x))
    }

    #[test]
    fn dsc_examples() {
        let a = line(16, |x| x < 8);
        let b = line(16, |x| (4..12).contains(&x));
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &line(16, |x| x >= 8)).unwrap(), 0.0);
        assert_eq!(dsc(&a, &b).unwrap(), 0.5);
        let e = line(16, |_| false);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert!(dsc(&a, &line(15, |_| true)).is_err());
    }

    #[test]
    fn volume_examples() {
        let g = Geometry::simple([10, 1, 1], [1.0, 1.0, 3.0]).unwrap();
        assert_eq!(volume_mm3(&Mask3D::from_fn(g.clone(), |_, _, _| true)), 30.0);
        assert_eq!(volume_mm3(&Mask3D::empty(g)), 0.0);
    }

    #[test]
    fn digitised_sphere_volume_and_diameter() {
        let g = Geometry::simple([25, 25, 25], [1.0; 3]).unwrap();
        let m = Mask3D::from_fn(g, |x, y, z| {
            let d2 = (x as f64 - 12.0).powi(2) + (y as f64 - 12.0).powi(2) + (z as f64 - 12.0).powi(2);
            d2 <= 100.0
        });
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 1000.0;
        assert!((volume_mm3(&m) - exact).abs() / exact < 0.05);
        let d = max_diameter_transverse(&m).unwrap();
        assert!((d - 20.0).abs() <= 2f64.sqrt(), "diameter {d}");
    }

    #[test]
    fn diameter_examples() {
        assert_eq!(max_diameter_transverse(&line(5, |x| x == 2)).unwrap(), 0.0);
        assert_eq!(max_diameter_transverse(&line(5, |x| x == 0 || x == 3)).unwrap(), 3.0);
        assert!(max_diameter_transverse(&line(5, |_| false)).is_err());
    }

    #[test]
    fn bland_altman_examples() {
        let ba = bland_altman(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((ba.mean_diff, ba.sd_diff, ba.loa_lo, ba.loa_hi), (0.0, 0.0, 0.0, 0.0));

        let ba = bland_altman(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert_eq!(ba.mean_diff, 0.0);
        assert!((ba.sd_diff - 1.41421).abs() < 1e-5);
        assert!((ba.loa_hi - 2.77186).abs() < 1e-5);
        assert!((ba.loa_lo + 2.77186).abs() < 1e-5);

        let pd = percent_diffs(&[10.0, 12.0], &[11.0, 11.0]);
        assert!((pd[0] + 9.5238).abs() < 1e-4);
        assert!((pd[1] - 8.6957).abs() < 1e-4);
        assert!(bland_altman(&[1.0], &[1.0]).is_err());
        assert!(bland_altman(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson_r(&x, &x.map(|v| 2.0 * v)).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson_r(&x, &x.map(|v| -v)).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson_r(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(pearson_r(&x, &[1.0; 4]).is_err());
    }

    #[test]
    fn t_test_examples() {
        let r = paired_t_test(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert_eq!((r.t, r.p_two_sided), (0.0, 1.0));

        let r = paired_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
        assert!((r.t - 4.24264).abs() < 1e-5);
        assert_eq!(r.df, 4.0);
        assert!((r.p_two_sided - 0.0132).abs() < 1e-3);

        assert!(paired_t_test(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn incomplete_beta_edges() {
        assert_eq!(regularized_incomplete_beta(0.0, 2.0, 3.0), 0.0);
        assert_eq!(regularized_incomplete_beta(1.0, 2.0, 3.0), 1.0);
        // I_x(1, 1) = x
        assert!((regularized_incomplete_beta(0.3, 1.0, 1.0) - 0.3).abs() < 1e-12);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn quality_score_labels() {
        assert_eq!(
            serde_json::to_string(&QualityScore::CannotLocate).unwrap(),
            "\"Cannot locate tumor\""
        );
    }
}
