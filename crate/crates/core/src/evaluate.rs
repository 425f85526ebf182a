//! Landmark distance metrics, grouped accuracy reports, rater agreement and
//! the rank tests used to compare landmark groups and paired coordinates.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::landmarks::{Frame, Group, LandmarkId, LandmarkSet};

/// Largest sample for which the signed-rank p-value is computed exactly.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LandmarkError {
    pub id: LandmarkId,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub d3: f64,
}

impl LandmarkError {
    /// Builds an error record from already-aggregated components, e.g.
    /// reference per-landmark means where `d3` is not the norm of the others.
    pub fn from_components(id: LandmarkId, dx: f64, dy: f64, dz: f64, d3: f64) -> Result<Self> {
        for (name, v) in [("dx", dx), ("dy", dy), ("dz", dz), ("d3", d3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{id}: {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(LandmarkError { id, dx, dy, dz, d3 })
    }
}

pub fn landmark_error(reference: [f64; 3], predicted: [f64; 3], id: LandmarkId) -> Result<LandmarkError> {
    if reference.iter().chain(&predicted).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{id}: non-finite coordinate")));
    }
    let d = [0, 1, 2].map(|a| predicted[a] - reference[a]);
    Ok(LandmarkError {
        id,
        dx: d[0].abs(),
        dy: d[1].abs(),
        dz: d[2].abs(),
        d3: (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt(),
    })
}

/// All landmark errors of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectErrors {
    pub subject: String,
    pub errors: Vec<LandmarkError>,
}

/// Compares two world-frame sets landmark by landmark.
pub fn subject_errors(subject: &str, reference: &LandmarkSet, predicted: &LandmarkSet) -> Result<SubjectErrors> {
    if reference.frame() != Frame::World || predicted.frame() != Frame::World {
        return Err(Error::InvalidArgument("evaluation compares world-frame landmark sets".into()));
    }
    let mut errors = Vec::with_capacity(LandmarkId::COUNT);
    for id in LandmarkId::ALL {
        let missing = || Error::IncompleteData {
            subject: subject.to_string(),
            landmark: id.to_string(),
        };
        let r = reference.get(id).ok_or_else(missing)?;
        let p = predicted.get(id).ok_or_else(missing)?;
        errors.push(landmark_error(r, p, id)?);
    }
    Ok(SubjectErrors {
        subject: subject.to_string(),
        errors,
    })
}

/// Reference points as the componentwise mean of two observers.
pub fn average_observers(a: &LandmarkSet, b: &LandmarkSet) -> Result<LandmarkSet> {
    if a.frame() != b.frame() {
        return Err(Error::InvalidArgument("observer sets use different frames".into()));
    }
    let mut out = LandmarkSet::new(a.frame());
    for (id, p) in a.iter() {
        let q = b
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("second observer has no {id}")))?;
        out.insert(id, [0, 1, 2].map(|k| 0.5 * (p[k] + q[k])));
    }
    if out.len() != b.len() {
        return Err(Error::InvalidArgument("observer sets cover different landmarks".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample SD (n - 1); 0 for fewer than two values.
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> MeanSd {
        let n = values.len();
        if n == 0 {
            return MeanSd::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        MeanSd { mean, sd }
    }

    /// Unweighted average of means and of SDs.
    fn average(items: &[MeanSd]) -> MeanSd {
        let n = items.len().max(1) as f64;
        MeanSd {
            mean: items.iter().map(|s| s.mean).sum::<f64>() / n,
            sd: items.iter().map(|s| s.sd).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandmarkRow {
    pub id: LandmarkId,
    pub group: Group,
    pub n: usize,
    pub d3: MeanSd,
    pub dx: MeanSd,
    pub dy: MeanSd,
    pub dz: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRow {
    pub group: Group,
    /// Unweighted mean of the member landmarks' d3 means.
    pub d3_mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KruskalWallis {
    pub h: f64,
    pub df: usize,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub subjects: usize,
    /// Catalog order.
    pub rows: Vec<LandmarkRow>,
    pub groups: Vec<GroupRow>,
    /// Means and SDs averaged over the landmark rows.
    pub total_d3: MeanSd,
    pub total_dx: MeanSd,
    pub total_dy: MeanSd,
    pub total_dz: MeanSd,
    /// Mean of the three per-axis totals.
    pub axis_mean: f64,
    /// Rank test of d3 across the three landmark groups, when computable.
    pub kruskal_wallis: Option<KruskalWallis>,
}

impl EvalReport {
    pub fn row(&self, id: LandmarkId) -> &LandmarkRow {
        &self.rows[id.index()]
    }

    pub fn group_mean(&self, g: Group) -> f64 {
        self.groups.iter().find(|r| r.group == g).map_or(f64::NAN, |r| r.d3_mean)
    }
}

/// Per-landmark statistics over subjects, then unweighted group and total
/// averages over the landmark rows.
pub fn build_report(subjects: &[SubjectErrors]) -> Result<EvalReport> {
    if subjects.is_empty() {
        return Err(Error::InsufficientData("no subjects to report".into()));
    }
    let mut per: Vec<[Vec<f64>; 4]> = vec![Default::default(); LandmarkId::COUNT];
    for s in subjects {
        let mut seen = [false; LandmarkId::COUNT];
        for e in &s.errors {
            if std::mem::replace(&mut seen[e.id.index()], true) {
                return Err(Error::InvalidArgument(format!(
                    "subject {} lists {} twice",
                    s.subject, e.id
                )));
            }
            let slot = &mut per[e.id.index()];
            slot[0].push(e.d3);
            slot[1].push(e.dx);
            slot[2].push(e.dy);
            slot[3].push(e.dz);
        }
        if let Some(missing) = LandmarkId::ALL.iter().find(|id| !seen[id.index()]) {
            return Err(Error::IncompleteData {
                subject: s.subject.clone(),
                landmark: missing.to_string(),
            });
        }
    }
    let rows: Vec<LandmarkRow> = LandmarkId::ALL
        .iter()
        .map(|&id| {
            let v = &per[id.index()];
            LandmarkRow {
                id,
                group: id.group(),
                n: v[0].len(),
                d3: MeanSd::of(&v[0]),
                dx: MeanSd::of(&v[1]),
                dy: MeanSd::of(&v[2]),
                dz: MeanSd::of(&v[3]),
            }
        })
        .collect();
    let groups = Group::ALL
        .iter()
        .map(|&g| {
            let means: Vec<f64> = rows.iter().filter(|r| r.group == g).map(|r| r.d3.mean).collect();
            GroupRow {
                group: g,
                d3_mean: means.iter().sum::<f64>() / means.len() as f64,
            }
        })
        .collect();
    let total = |f: fn(&LandmarkRow) -> MeanSd| MeanSd::average(&rows.iter().map(f).collect::<Vec<_>>());
    let (total_dx, total_dy, total_dz) = (total(|r| r.dx), total(|r| r.dy), total(|r| r.dz));
    let by_group: Vec<Vec<f64>> = Group::ALL
        .iter()
        .map(|&g| g.members().flat_map(|id| per[id.index()][0].iter().copied()).collect())
        .collect();
    let kw = kruskal_wallis(&by_group).ok();
    Ok(EvalReport {
        subjects: subjects.len(),
        total_d3: total(|r| r.d3),
        axis_mean: (total_dx.mean + total_dy.mean + total_dz.mean) / 3.0,
        total_dx,
        total_dy,
        total_dz,
        rows,
        groups,
        kruskal_wallis: kw,
    })
}

/// Tab-separated table: one row per landmark, then the total row and
/// summary lines. Values are printed with two decimals.
pub fn format_table(r: &EvalReport) -> String {
    let mut s = String::from(
        "landmark\tgroup\td3_mean\td3_sd\tdx_mean\tdx_sd\tdy_mean\tdy_sd\tdz_mean\tdz_sd\tgroup_mean\n",
    );
    let cells = |a: MeanSd, b: MeanSd, c: MeanSd, d: MeanSd| {
        [a, b, c, d]
            .iter()
            .map(|m| format!("{:.2}\t{:.2}", m.mean, m.sd))
            .collect::<Vec<_>>()
            .join("\t")
    };
    for g in Group::ALL {
        for row in r.rows.iter().filter(|row| row.group == g) {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.2}",
                row.id,
                g.name(),
                cells(row.d3, row.dx, row.dy, row.dz),
                r.group_mean(g)
            );
        }
    }
    let _ = writeln!(
        s,
        "Total\tAll\t{}\t{:.2}",
        cells(r.total_d3, r.total_dx, r.total_dy, r.total_dz),
        r.total_d3.mean
    );
    let _ = writeln!(s, "# subjects\t{}", r.subjects);
    let _ = writeln!(s, "# axis_mean\t{:.2}", r.axis_mean);
    match &r.kruskal_wallis {
        Some(kw) => {
            let _ = writeln!(s, "# kruskal_wallis\tH={:.4}\tdf={}\tp={:.4}", kw.h, kw.df, kw.p);
        }
        None => s.push_str("# kruskal_wallis\tnot computable\n"),
    }
    s
}

/// One JSON object per landmark, then one for the totals.
pub fn format_jsonl(r: &EvalReport) -> String {
    #[derive(Serialize)]
    struct Row<'a> {
        landmark: String,
        group: &'a str,
        n: usize,
        d3: MeanSd,
        dx: MeanSd,
        dy: MeanSd,
        dz: MeanSd,
        group_mean: f64,
    }
    #[derive(Serialize)]
    struct Total<'a> {
        landmark: &'a str,
        subjects: usize,
        d3: MeanSd,
        dx: MeanSd,
        dy: MeanSd,
        dz: MeanSd,
        axis_mean: f64,
        groups: Vec<(&'a str, f64)>,
        kruskal_wallis: Option<KruskalWallis>,
    }
    let mut s = String::new();
    for row in &r.rows {
        let rec = Row {
            landmark: row.id.to_string(),
            group: row.group.name(),
            n: row.n,
            d3: row.d3,
            dx: row.dx,
            dy: row.dy,
            dz: row.dz,
            group_mean: r.group_mean(row.group),
        };
        s.push_str(&serde_json::to_string(&rec).expect("plain data serializes"));
        s.push('\n');
    }
    let total = Total {
        landmark: "Total",
        subjects: r.subjects,
        d3: r.total_d3,
        dx: r.total_dx,
        dy: r.total_dy,
        dz: r.total_dz,
        axis_mean: r.axis_mean,
        groups: r.groups.iter().map(|g| (g.group.name(), g.d3_mean)).collect(),
        kruskal_wallis: r.kruskal_wallis,
    };
    s.push_str(&serde_json::to_string(&total).expect("plain data serializes"));
    s.push('\n');
    s
}

/// `subject landmark dx dy dz d3`, whitespace separated, one line per error.
pub fn errors_to_tsv(subjects: &[SubjectErrors]) -> String {
    let mut s = String::from("# subject\tlandmark\tdx\tdy\tdz\td3\n");
    for sub in subjects {
        for e in &sub.errors {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}", sub.subject, e.id, e.dx, e.dy, e.dz, e.d3);
        }
    }
    s
}

pub fn parse_errors_tsv(text: &str) -> std::result::Result<Vec<SubjectErrors>, String> {
    let mut out: Vec<SubjectErrors> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(format!("line {}: expected `subject landmark dx dy dz d3`", i + 1));
        }
        let id: LandmarkId = f[1].parse().map_err(|e: Error| format!("line {}: {e}", i + 1))?;
        let mut v = [0.0; 4];
        for k in 0..4 {
            v[k] = f[k + 2]
                .parse()
                .map_err(|_| format!("line {}: bad number {:?}", i + 1, f[k + 2]))?;
        }
        let e = LandmarkError::from_components(id, v[0], v[1], v[2], v[3]).map_err(|e| format!("line {}: {e}", i + 1))?;
        match out.iter_mut().find(|s| s.subject == f[0]) {
            Some(s) => s.errors.push(e),
            None => out.push(SubjectErrors {
                subject: f[0].to_string(),
                errors: vec![e],
            }),
        }
    }
    Ok(out)
}

pub fn read_errors_tsv(path: impl AsRef<Path>) -> Result<Vec<SubjectErrors>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_errors_tsv(&text).map_err(|d| Error::format(path, d))
}

fn sample_variance(x: &[f64]) -> f64 {
    MeanSd::of(x).sd.powi(2)
}

/// Cronbach's alpha for two raters:
/// `2 * (1 - (var(a) + var(b)) / var(a + b))` with sample variances.
pub fn icc_cronbach(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "rater series differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InsufficientData("need at least two paired measurements".into()));
    }
    let sums: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
    let total = sample_variance(&sums);
    if !(total > 0.0) {
        return Err(Error::Degenerate("total score variance is zero".into()));
    }
    Ok(2.0 * (1.0 - (sample_variance(a) + sample_variance(b)) / total))
}

/// Mid-ranks (1-based) and the tie term `sum(t^3 - t)` over tie groups.
pub fn midranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        let t = (end - start) as f64;
        ties += t * t * t - t;
        start = end;
    }
    (ranks, ties)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Wilcoxon {
    /// Non-zero differences used.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(w_plus, w_minus)`.
    pub w: f64,
    pub z: f64,
    /// Two-sided normal approximation with tie-corrected variance.
    pub p_normal: f64,
    /// Two-sided exact p over all sign patterns, for `n <= 25`.
    pub p_exact: Option<f64>,
}

impl Wilcoxon {
    /// Exact p when available, otherwise the normal approximation.
    pub fn p(&self) -> f64 {
        self.p_exact.unwrap_or(self.p_normal)
    }
}

pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<Wilcoxon> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidArgument("non-finite difference".into()));
    }
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    if n < 6 {
        return Err(Error::InsufficientData(format!(
            "signed-rank test needs >= 6 non-zero differences, got {n}"
        )));
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = midranks(&abs);
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let nf = n as f64;
    let w_minus = nf * (nf + 1.0) / 2.0 - w_plus;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    let z = if var > 0.0 { (w_plus - mean) / var.sqrt() } else { 0.0 };
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let p_normal = (2.0 * (1.0 - std_normal.cdf(z.abs()))).min(1.0);
    let p_exact = (n <= WILCOXON_EXACT_MAX_N).then(|| exact_signed_rank_p(&ranks, w_plus));
    Ok(Wilcoxon {
        n,
        w_plus,
        w_minus,
        w: w_plus.min(w_minus),
        z,
        p_normal,
        p_exact,
    })
}

/// Two-sided exact p: counts sign assignments whose positive rank sum is at
/// least as extreme as `w_plus`. Ranks are doubled so mid-ranks stay integral.
fn exact_signed_rank_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let t = (2.0 * w_plus).round() as usize;
    let total = 2f64.powi(ranks.len() as i32);
    let le: u64 = counts[..=t].iter().sum();
    let ge: u64 = counts[t..].iter().sum();
    (2.0 * le.min(ge) as f64 / total).min(1.0)
}

/// Tie-corrected H with a chi-square p-value on `groups - 1` degrees of
/// freedom. When every observation is tied, H is 0 and p is 1.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<KruskalWallis> {
    if groups.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "Kruskal-Wallis needs >= 2 groups, got {}",
            groups.len()
        )));
    }
    if let Some(i) = groups.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("group {i} is empty")));
    }
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite observation".into()));
    }
    let n = pooled.len() as f64;
    if pooled.len() < 5 {
        return Err(Error::InsufficientData(format!(
            "Kruskal-Wallis needs >= 5 observations, got {}",
            pooled.len()
        )));
    }
    let (ranks, ties) = midranks(&pooled);
    let mut offset = 0;
    let mut sum = 0.0;
    for g in groups {
        let r: f64 = ranks[offset..offset + g.len()].iter().sum();
        sum += r * r / g.len() as f64;
        offset += g.len();
    }
    let df = groups.len() - 1;
    let correction = 1.0 - ties / (n * n * n - n);
    if correction <= 0.0 {
        return Ok(KruskalWallis { h: 0.0, df, p: 1.0 });
    }
    let h = ((12.0 / (n * (n + 1.0)) * sum - 3.0 * (n + 1.0)) / correction).max(0.0);
    let chi = ChiSquared::new(df as f64).expect("df >= 1");
    Ok(KruskalWallis {
        h,
        df,
        p: (1.0 - chi.cdf(h)).clamp(0.0, 1.0),
    })
}
