//! Line-oriented query loop over a loaded catalogue.

use std::io::{self, BufRead, Write};
use std::time::Instant;

use mlaqp_core::drift::MonitorConfig;
use mlaqp_core::engine::{Engine, Estimate};
use mlaqp_core::MetaVector;

use crate::monitor::LiveMonitor;

const HELP: &str = "\
enter a SQL aggregate query, or
  .explain <sql>   show the meta-vector
  .drift           show workload monitor status
  .help            this text
  .quit            leave";

pub fn format_estimate(e: &Estimate) -> String {
    match &e.interval {
        Some(iv) => format!(
            "{} = {} [{}, {}] at {:.0}% ({})",
            e.af,
            e.estimate,
            iv.low,
            iv.high,
            iv.nominal_coverage * 100.0,
            e.model_id
        ),
        None => format!("{} = {} ({})", e.af, e.estimate, e.model_id),
    }
}

/// One line per attribute slot pair, then any extra encoded slots.
pub fn format_meta(engine: &Engine, meta: &MetaVector) -> String {
    let attrs = engine.catalogue().schema.attributes();
    let show = |v: Option<f64>| v.map_or_else(|| "missing".to_string(), |x| x.to_string());
    let mut out = Vec::new();
    for (i, a) in attrs.iter().enumerate() {
        out.push(format!(
            "  {:<12} lb={} ub={}",
            a.name,
            show(meta.get(2 * i)),
            show(meta.get(2 * i + 1))
        ));
    }
    for s in 2 * attrs.len()..meta.width() {
        if let Some(v) = meta.get(s) {
            out.push(format!("  slot {s:<7} {v}"));
        }
    }
    out.join("\n")
}

pub struct Repl {
    engine: Engine,
    monitor: Option<LiveMonitor>,
}

impl Repl {
    pub fn new(engine: Engine, cfg: MonitorConfig) -> Self {
        let monitor = LiveMonitor::new(engine.catalogue().clone(), cfg).ok();
        Repl { engine, monitor }
    }

    /// Handles one input line. Returns `false` on `.quit`.
    pub fn line<W: Write>(&mut self, line: &str, out: &mut W) -> io::Result<bool> {
        let line = line.trim();
        if line.is_empty() {
            return Ok(true);
        }
        if let Some(cmd) = line.strip_prefix('.') {
            let (name, rest) = cmd.split_once(char::is_whitespace).unwrap_or((cmd, ""));
            match name {
                "quit" | "exit" => return Ok(false),
                "help" => writeln!(out, "{HELP}")?,
                "explain" => match self.engine.parse(rest).and_then(|q| self.engine.vectorize(&q)) {
                    Ok(meta) => writeln!(out, "{}", format_meta(&self.engine, &meta))?,
                    Err(e) => writeln!(out, "error: {e}")?,
                },
                "drift" => match &self.monitor {
                    Some(m) => writeln!(out, "{}", serde_json::to_string_pretty(&m.status()).unwrap_or_default())?,
                    None => writeln!(out, "no drift snapshot in this catalogue")?,
                },
                _ => writeln!(out, "unknown command .{name}; try .help")?,
            }
            return Ok(true);
        }
        let start = Instant::now();
        let result = self.engine.parse(line).and_then(|q| {
            let est = self.engine.predict_query(&q)?;
            let meta = self.engine.vectorize(&q)?;
            Ok((est, meta))
        });
        let micros = start.elapsed().as_micros();
        match result {
            Ok((est, meta)) => {
                for e in &est.estimates {
                    writeln!(out, "{}", format_estimate(e))?;
                }
                for g in est.groups.iter().flatten() {
                    let key: Vec<String> = g.key.iter().map(|v| v.to_string()).collect();
                    for e in &g.estimates {
                        writeln!(out, "  ({}) {}", key.join(", "), format_estimate(e))?;
                    }
                }
                writeln!(out, "{micros} us")?;
                if let Some(m) = &mut self.monitor {
                    if let Ok(Some(ev)) = m.observe_vector(meta.as_raw()) {
                        writeln!(out, "drift: {}", serde_json::to_string(&ev).unwrap_or_default())?;
                    }
                }
            }
            Err(e) => writeln!(out, "error: {e}")?,
        }
        Ok(true)
    }

    /// Reads until end of input or `.quit`. The prompt goes to `out` only
    /// when `prompt` is set.
    pub fn run<R: BufRead, W: Write>(&mut self, input: R, out: &mut W, prompt: bool) -> io::Result<()> {
        if prompt {
            write!(out, "mlaqp> ")?;
            out.flush()?;
        }
        for line in input.lines() {
            if !self.line(&line?, out)? {
                break;
            }
            if prompt {
                write!(out, "mlaqp> ")?;
                out.flush()?;
            }
        }
        Ok(())
    }
}
