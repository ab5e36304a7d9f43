//! Aggregates sweep results per architecture and GD ratio.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{LabError, LabResult};

#[derive(Clone, Debug, Deserialize)]
struct Row {
    arch: String,
    lr: f64,
    gd_ratio: usize,
    sbd: Option<f64>,
    status: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub arch: String,
    pub gd_ratio: usize,
    pub runs: usize,
    pub ok: usize,
    pub sbd_mean: Option<f64>,
    pub sbd_median: Option<f64>,
    pub sbd_min: Option<f64>,
    pub best_lr: Option<f64>,
}

pub const HEADER: &str = "arch,gd_ratio,runs,ok,sbd_mean,sbd_median,sbd_min,best_lr";

pub fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

pub fn summarize(path: &Path) -> LabResult<Vec<Group>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| LabError::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let mut groups: BTreeMap<(String, usize), Vec<Row>> = BTreeMap::new();
    for rec in rdr.deserialize() {
        let row: Row = rec.map_err(|e| LabError::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        groups.entry((row.arch.clone(), row.gd_ratio)).or_default().push(row);
    }
    Ok(groups
        .into_iter()
        .map(|((arch, gd_ratio), rows)| {
            let ok: Vec<&Row> = rows.iter().filter(|r| r.status == "ok" && r.sbd.is_some()).collect();
            let mut sbds: Vec<f64> = ok.iter().filter_map(|r| r.sbd).collect();
            let best = ok.iter().min_by(|a, b| a.sbd.unwrap().total_cmp(&b.sbd.unwrap()));
            Group {
                arch,
                gd_ratio,
                runs: rows.len(),
                ok: ok.len(),
                sbd_mean: (!sbds.is_empty()).then(|| sbds.iter().sum::<f64>() / sbds.len() as f64),
                sbd_min: best.and_then(|r| r.sbd),
                best_lr: best.map(|r| r.lr),
                sbd_median: median(&mut sbds),
            }
        })
        .collect())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn to_csv(groups: &[Group]) -> String {
    let mut s = format!("{HEADER}\n");
    for g in groups {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            g.arch,
            g.gd_ratio,
            g.runs,
            g.ok,
            opt(g.sbd_mean),
            opt(g.sbd_median),
            opt(g.sbd_min),
            opt(g.best_lr)
        ));
    }
    s
}
