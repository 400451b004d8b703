use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{dice, hausdorff, HdStatistic};
use crate::error::{Error, Result};
use crate::volio::{read_labels, LabelSchema};

/// One subject × structure measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub subject: String,
    pub structure: String,
    pub dice: f64,
    /// Missing when either mask is empty.
    pub hd_mm: Option<f64>,
    /// Whether the reference contains the structure; only such rows enter
    /// the cohort statistics.
    pub in_reference: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub structure: String,
    pub dice: Option<SummaryStat>,
    pub hd_mm: Option<SummaryStat>,
    pub dice_box: Option<BoxStats>,
    pub hd_box: Option<BoxStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub hd_statistic: HdStatistic,
    pub hd_units: String,
    pub empty_dice: String,
    pub rows: Vec<Row>,
    /// One entry per structure followed by `Avg`.
    pub summary: Vec<Summary>,
}

pub fn mean_std(values: &[f64]) -> Option<SummaryStat> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some(SummaryStat { mean, std: var.sqrt(), n: values.len() })
}

/// Min, quartiles (linear interpolation) and max.
pub fn five_number(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    let mut q = |p| super::percentile(&mut v, p);
    Some(BoxStats { min: q(0.0), q1: q(25.0), median: q(50.0), q3: q(75.0), max: q(100.0) })
}

fn summarize(structure: &str, dice: &[f64], hd: &[f64]) -> Summary {
    Summary {
        structure: structure.to_string(),
        dice: mean_std(dice),
        hd_mm: mean_std(hd),
        dice_box: five_number(dice),
        hd_box: five_number(hd),
    }
}

impl MetricsReport {
    /// Aggregates rows: per-structure statistics over subjects whose
    /// reference contains the structure, then `Avg` over per-subject means.
    pub fn from_rows(schema: &LabelSchema, stat: HdStatistic, rows: Vec<Row>) -> Self {
        let mut summary = Vec::new();
        for (name, _) in schema.foreground() {
            let sel: Vec<&Row> = rows.iter().filter(|r| r.structure == name && r.in_reference).collect();
            let d: Vec<f64> = sel.iter().map(|r| r.dice).collect();
            let h: Vec<f64> = sel.iter().filter_map(|r| r.hd_mm).collect();
            summary.push(summarize(name, &d, &h));
        }
        let mut per_subject: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.in_reference) {
            let e = per_subject.entry(&r.subject).or_default();
            e.0.push(r.dice);
            e.1.extend(r.hd_mm);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let avg_d: Vec<f64> = per_subject.values().map(|(d, _)| mean(d)).collect();
        let avg_h: Vec<f64> = per_subject.values().filter(|(_, h)| !h.is_empty()).map(|(_, h)| mean(h)).collect();
        summary.push(summarize("Avg", &avg_d, &avg_h));
        MetricsReport {
            schema: schema.name().to_string(),
            hd_statistic: stat,
            hd_units: "mm (assumed from voxel spacing)".into(),
            empty_dice: "both masks empty scores 1.0".into(),
            rows,
            summary,
        }
    }

    pub fn structure(&self, name: &str) -> Option<&Summary> {
        self.summary.iter().find(|s| s.structure == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject,structure,dice,hd_mm\n");
        for r in &self.rows {
            let hd = r.hd_mm.map(|h| h.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.subject, r.structure, r.dice, hd));
        }
        out
    }

    /// `mean±std` table with one line per structure.
    pub fn to_table(&self) -> String {
        let fmt = |s: &Option<SummaryStat>, digits: usize| match s {
            Some(s) => format!("{:.*}±{:.*}", digits, s.mean, digits, s.std),
            None => "n/a".into(),
        };
        let mut out = format!("{:<10} {:>16} {:>16}\n", "structure", "dice", "hd_mm");
        for s in &self.summary {
            out.push_str(&format!("{:<10} {:>16} {:>16}\n", s.structure, fmt(&s.dice, 3), fmt(&s.hd_mm, 2)));
        }
        out
    }

    pub fn write(&self, csv: &Path, json: &Path) -> Result<()> {
        std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        std::fs::write(json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(json, e))
    }
}

fn nifti_stem(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii")).map(str::to_string)
}

fn list_nifti(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if let Some(stem) = nifti_stem(&path) {
            if out.insert(stem.clone(), path).is_some() {
                return Err(Error::data(format!("{} holds both {stem}.nii and {stem}.nii.gz", dir.display())));
            }
        }
    }
    Ok(out)
}

/// Scores every prediction in `pred_dir` against the reference with the
/// same file stem in `gt_dir`.
pub fn evaluate_study(pred_dir: &Path, gt_dir: &Path, schema: &LabelSchema, stat: HdStatistic) -> Result<MetricsReport> {
    let preds = list_nifti(pred_dir)?;
    let gts = list_nifti(gt_dir)?;
    if gts.is_empty() {
        return Err(Error::data(format!("no NIfTI files in {}", gt_dir.display())));
    }
    for stem in preds.keys() {
        if !gts.contains_key(stem) {
            return Err(Error::data(format!("prediction {stem} has no reference in {}", gt_dir.display())));
        }
    }
    let mut rows = Vec::new();
    for (stem, gt_path) in &gts {
        let pred_path = preds.get(stem).ok_or_else(|| Error::data(format!("reference {stem} has no prediction in {}", pred_dir.display())))?;
        let gt = read_labels(gt_path, schema)?;
        let pred = read_labels(pred_path, schema)?;
        for (name, cls) in schema.foreground() {
            let hd_mm = match hausdorff(&pred, &gt, cls, stat) {
                Ok(h) => Some(h),
                Err(Error::UndefinedDistance(_)) => None,
                Err(e) => return Err(e),
            };
            rows.push(Row {
                subject: stem.clone(),
                structure: name.to_string(),
                dice: dice(&pred, &gt, cls)?,
                hd_mm,
                in_reference: gt.count(cls) > 0,
            });
        }
    }
    Ok(MetricsReport::from_rows(schema, stat, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volio::SchemaView;

    #[test]
    fn five_numbers_are_ordered() {
        let b = five_number(&[3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0]).unwrap();
        assert!(b.min <= b.q1 && b.q1 <= b.median && b.median <= b.q3 && b.q3 <= b.max);
        assert_eq!((b.min, b.median, b.max), (1.0, 3.0, 9.0));
    }

    #[test]
    fn avg_is_mean_of_subject_means() {
        let schema = LabelSchema::get(SchemaView::Sax);
        let row = |s: &str, st: &str, d: f64, ok: bool| Row { subject: s.into(), structure: st.into(), dice: d, hd_mm: Some(d), in_reference: ok };
        let rows = vec![
            row("a", "LV", 1.0, true),
            row("a", "LVM", 0.5, true),
            row("a", "RV", 0.0, false),
            row("b", "LV", 0.6, true),
            row("b", "LVM", 0.6, true),
            row("b", "RV", 0.6, true),
        ];
        let r = MetricsReport::from_rows(&schema, HdStatistic::Max, rows);
        let avg = r.structure("Avg").unwrap().dice.unwrap();
        assert!((avg.mean - 0.675).abs() < 1e-12);
        assert!((avg.std - 0.075).abs() < 1e-12);
        assert_eq!(r.structure("RV").unwrap().dice.unwrap().n, 1);
        assert!(r.to_csv().starts_with("subject,structure,dice,hd_mm\n"));
    }
}
