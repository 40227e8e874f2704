//! Run statistics and execution traces.
//!
//! Stats are written as CSV with a fixed column set; traces as tab-separated
//! records that [`trace_to_chrome_json`] turns into the JSON array format
//! understood by browser profilers.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::datahier::Rank;
use crate::error::{Error, Result};

pub const STATS_HEADER: &str = "rank,tasks_l0,tasks_l1,msgs_out,msgs_in,bytes,max_pending,work_proxy";
pub const TRACE_HEADER: &str = "rank\tthread\ttask_id\tkind\tlevel\tstart_ns\tend_ns";

/// Per-rank counters collected by the coordinator.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RankStats {
    pub rank: Rank,
    pub tasks_l0: u64,
    pub tasks_l1: u64,
    pub msgs_out: u64,
    pub msgs_in: u64,
    /// True content bytes of every DATA listener fired here.
    pub bytes: u64,
    pub max_pending: u64,
    /// Leaf tasks times the work of one leaf (n³ for dense kernels).
    pub work_proxy: u64,
    pub steals: u64,
    pub max_inflight_steps: u64,
}

impl RankStats {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.rank,
            self.tasks_l0,
            self.tasks_l1,
            self.msgs_out,
            self.msgs_in,
            self.bytes,
            self.max_pending,
            self.work_proxy
        )
    }
}

/// Totals and spreads over all ranks of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimStats {
    pub ranks: Vec<RankStats>,
}

impl SimStats {
    pub fn new(mut ranks: Vec<RankStats>) -> Self {
        ranks.sort_by_key(|r| r.rank);
        SimStats { ranks }
    }

    pub fn total_bytes(&self) -> u64 {
        self.ranks.iter().map(|r| r.bytes).sum()
    }

    pub fn total_messages(&self) -> u64 {
        self.ranks.iter().map(|r| r.msgs_out).sum()
    }

    pub fn max_pending(&self) -> u64 {
        self.ranks.iter().map(|r| r.max_pending).max().unwrap_or(0)
    }

    pub fn max_work(&self) -> u64 {
        self.ranks.iter().map(|r| r.work_proxy).max().unwrap_or(0)
    }

    /// Population variance of the per-rank work proxy.
    pub fn work_variance(&self) -> f64 {
        if self.ranks.is_empty() {
            return 0.0;
        }
        let n = self.ranks.len() as f64;
        let mean = self.ranks.iter().map(|r| r.work_proxy as f64).sum::<f64>() / n;
        self.ranks
            .iter()
            .map(|r| (r.work_proxy as f64 - mean).powi(2))
            .sum::<f64>()
            / n
    }

    pub fn to_csv(&self) -> String {
        stats_csv(&self.ranks)
    }
}

pub fn stats_csv(rows: &[RankStats]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(STATS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn write_stats(path: &Path, rows: &[RankStats]) -> Result<()> {
    fs::write(path, stats_csv(rows))?;
    Ok(())
}

/// One executed task body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub rank: Rank,
    /// 0 is the coordinator, workers count from 1.
    pub thread: u32,
    pub task_id: u64,
    pub kind: String,
    pub level: u8,
    pub start_ns: u64,
    pub end_ns: u64,
}

pub fn write_trace(path: &Path, events: &[TraceEvent]) -> Result<()> {
    let mut out = String::with_capacity(48 * (events.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for e in events {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            e.rank, e.thread, e.task_id, e.kind, e.level, e.start_ns, e.end_ns
        )
        .expect("string write");
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceEvent>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().transpose()?;
    if header.as_deref() != Some(TRACE_HEADER) {
        return Err(Error::Parse(format!("{} lacks the trace header", path.display())));
    }
    let mut events = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(Error::Parse(format!("trace line {}: expected 7 fields", n + 2)));
        }
        let num = |s: &str| -> Result<u64> {
            s.parse()
                .map_err(|e| Error::Parse(format!("trace line {}: `{s}`: {e}", n + 2)))
        };
        let ev = TraceEvent {
            rank: num(f[0])? as Rank,
            thread: num(f[1])? as u32,
            task_id: num(f[2])?,
            kind: f[3].to_string(),
            level: num(f[4])? as u8,
            start_ns: num(f[5])?,
            end_ns: num(f[6])?,
        };
        if ev.end_ns < ev.start_ns {
            return Err(Error::Parse(format!("trace line {}: ends before it starts", n + 2)));
        }
        events.push(ev);
    }
    Ok(events)
}

/// Complete-event ("ph":"X") array; ranks become processes, threads stay
/// threads, times are in microseconds.
pub fn trace_to_chrome_json(events: &[TraceEvent]) -> String {
    let arr: Vec<serde_json::Value> = events
        .iter()
        .map(|e| {
            serde_json::json!({
                "name": e.kind,
                "cat": format!("level{}", e.level),
                "ph": "X",
                "pid": e.rank,
                "tid": e.thread,
                "ts": e.start_ns as f64 / 1000.0,
                "dur": (e.end_ns - e.start_ns) as f64 / 1000.0,
                "args": { "task_id": e.task_id },
            })
        })
        .collect();
    serde_json::Value::Array(arr).to_string()
}

pub fn convert_trace(input: &Path, output: &Path) -> Result<usize> {
    let events = read_trace(input)?;
    fs::write(output, trace_to_chrome_json(&events))?;
    Ok(events.len())
}

/// First pair of events on one (rank, thread) whose intervals overlap.
pub fn find_thread_overlap(events: &[TraceEvent]) -> Option<(&TraceEvent, &TraceEvent)> {
    let mut sorted: Vec<&TraceEvent> = events.iter().collect();
    sorted.sort_by_key(|e| (e.rank, e.thread, e.start_ns, e.end_ns));
    sorted
        .windows(2)
        .find(|w| w[0].rank == w[1].rank && w[0].thread == w[1].thread && w[1].start_ns < w[0].end_ns)
        .map(|w| (w[0], w[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(thread: u32, start: u64, end: u64) -> TraceEvent {
        TraceEvent {
            rank: 0,
            thread,
            task_id: start,
            kind: "gemm".into(),
            level: 1,
            start_ns: start,
            end_ns: end,
        }
    }

    #[test]
    fn empty_run_gives_header_only() {
        assert_eq!(stats_csv(&[]), format!("{STATS_HEADER}\n"));
    }

    #[test]
    fn csv_rows_follow_header() {
        let r = RankStats {
            rank: 2,
            tasks_l0: 3,
            tasks_l1: 30,
            msgs_out: 4,
            msgs_in: 5,
            bytes: 4096,
            max_pending: 2,
            work_proxy: 30 * 8,
            ..Default::default()
        };
        assert_eq!(stats_csv(&[r]).lines().nth(1), Some("2,3,30,4,5,4096,2,240"));
    }

    #[test]
    fn trace_round_trip_and_chrome_export() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tsv");
        let events = vec![ev(1, 0, 10), ev(1, 10, 25), ev(2, 3, 4)];
        write_trace(&path, &events).unwrap();
        assert_eq!(read_trace(&path).unwrap(), events);
        let json: serde_json::Value = serde_json::from_str(&trace_to_chrome_json(&events)).unwrap();
        let arr = json.as_array().unwrap();
        assert_eq!(arr.len(), 3);
        assert_eq!(arr[1]["ph"], "X");
        assert_eq!(arr[1]["dur"], 0.015);
    }

    #[test]
    fn overlap_checker() {
        assert!(find_thread_overlap(&[ev(1, 0, 10), ev(1, 10, 20), ev(2, 5, 15)]).is_none());
        assert!(find_thread_overlap(&[ev(1, 0, 10), ev(1, 9, 20)]).is_some());
    }

    #[test]
    fn variance_of_equal_work_is_zero() {
        let rows = (0..3)
            .map(|r| RankStats {
                rank: r,
                work_proxy: 7,
                ..Default::default()
            })
            .collect();
        assert_eq!(SimStats::new(rows).work_variance(), 0.0);
    }
}
