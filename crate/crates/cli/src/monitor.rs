//! Drift monitoring of a live query log against a catalogue's snapshot.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::time::Duration;

use anyhow::{bail, Context};
use log::warn;
use mlaqp_core::catalogue::ModelCatalogue;
use mlaqp_core::drift::{DataShiftMonitor, DriftEvent, MonitorConfig, MonitorStatus, WorkloadShiftMonitor};
use mlaqp_core::engine::Engine;
use mlaqp_core::schema::QueryLogRecord;
use mlaqp_core::vectorize::group_vector;
use serde::Serialize;

/// One data-shift monitor per aggregate plus one workload monitor. The
/// data monitors split `alpha` evenly so that together they keep it.
#[derive(Debug)]
pub struct LiveMonitor {
    engine: Engine,
    data: BTreeMap<String, DataShiftMonitor<f64>>,
    workload: Option<WorkloadShiftMonitor<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LiveStatus {
    pub data: BTreeMap<String, MonitorStatus>,
    pub workload: Option<MonitorStatus>,
    pub workload_k: Option<f64>,
}

impl LiveMonitor {
    pub fn new(catalogue: ModelCatalogue, cfg: MonitorConfig) -> anyhow::Result<Self> {
        let Some(snapshot) = catalogue.drift.clone() else {
            bail!("catalogue has no drift snapshot; retrain it to enable monitoring");
        };
        let shared = MonitorConfig {
            alpha: cfg.alpha / snapshot.answers.len().max(1) as f64,
            ..cfg
        };
        let mut data = BTreeMap::new();
        for (key, ecdf) in snapshot.answers {
            data.insert(key, DataShiftMonitor::new(ecdf, shared)?);
        }
        let workload = match snapshot.workload {
            Some(stats) => Some(WorkloadShiftMonitor::new(stats, cfg)?),
            None => None,
        };
        Ok(LiveMonitor {
            engine: Engine::new(catalogue),
            data,
            workload,
        })
    }

    pub fn status(&self) -> LiveStatus {
        LiveStatus {
            data: self.data.iter().map(|(k, m)| (k.clone(), m.status())).collect(),
            workload: self.workload.as_ref().map(|m| m.status()),
            workload_k: self.workload.as_ref().map(|m| m.k()),
        }
    }

    /// Feeds a query vector to the workload monitor only.
    pub fn observe_vector(&mut self, meta: &[f64]) -> anyhow::Result<Option<DriftEvent>> {
        match &mut self.workload {
            Some(m) => Ok(m.push(meta)?),
            None => Ok(None),
        }
    }

    fn observe_answers(&mut self, answers: &BTreeMap<String, f64>, out: &mut Vec<DriftEvent>) -> anyhow::Result<()> {
        for (key, y) in answers {
            if let Some(m) = self.data.get_mut(key) {
                if let Some(mut ev) = m.push(*y)? {
                    ev.af = Some(key.clone());
                    out.push(ev);
                }
            }
        }
        Ok(())
    }

    /// Updates the monitors with one executed query and its answers.
    pub fn observe(&mut self, rec: &QueryLogRecord) -> anyhow::Result<Vec<DriftEvent>> {
        let q = self.engine.parse(&rec.sql)?;
        let base = self.engine.vectorize(&q)?;
        let mut events = Vec::new();
        if !rec.answers.is_empty() {
            events.extend(self.observe_vector(base.as_raw())?);
            self.observe_answers(&rec.answers, &mut events)?;
        }
        for g in rec.groups.iter().flatten() {
            let cat = self.engine.catalogue();
            let meta = group_vector(&base, &q.group_by, &g.key, &cat.schema, &cat.encoder)?;
            events.extend(self.observe_vector(meta.as_raw())?);
            self.observe_answers(&g.answers, &mut events)?;
        }
        Ok(events)
    }
}

#[cfg(unix)]
fn file_id(meta: &std::fs::Metadata) -> u64 {
    use std::os::unix::fs::MetadataExt;
    meta.ino()
}

#[cfg(not(unix))]
fn file_id(_: &std::fs::Metadata) -> u64 {
    0
}

/// Reads JSON-lines records from `path`, calling `on_line` with the line
/// number and parsed record. With `follow` the file is polled for growth,
/// and reopened from the start when it is truncated or replaced.
pub fn tail<F>(path: &Path, follow: bool, poll: Duration, mut on_line: F) -> anyhow::Result<()>
where
    F: FnMut(usize, Result<QueryLogRecord, String>) -> anyhow::Result<()>,
{
    let open = || -> anyhow::Result<(BufReader<File>, u64)> {
        let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let id = file_id(&f.metadata()?);
        Ok((BufReader::new(f), id))
    };
    let (mut reader, mut id) = open()?;
    let mut pos = 0u64;
    let mut line_no = 0usize;
    let mut buf = String::new();
    loop {
        let n = reader.read_line(&mut buf)?;
        if n > 0 && buf.ends_with('\n') {
            pos += buf.len() as u64;
            line_no += 1;
            let text = buf.trim();
            if !text.is_empty() {
                on_line(line_no, serde_json::from_str(text).map_err(|e| e.to_string()))?;
            }
            buf.clear();
            continue;
        }
        if !follow {
            if !buf.trim().is_empty() {
                line_no += 1;
                on_line(line_no, serde_json::from_str(buf.trim()).map_err(|e| e.to_string()))?;
            }
            return Ok(());
        }
        std::thread::sleep(poll);
        match std::fs::metadata(path) {
            Ok(meta) if file_id(&meta) != id || meta.len() < pos => {
                warn!("{} was rotated; reopening", path.display());
                (reader, id) = open()?;
                pos = 0;
                buf.clear();
            }
            Ok(_) => {}
            Err(e) => warn!("{}: {e}; waiting", path.display()),
        }
    }
}
