//! Message-trace replay under two delivery models: dial-then-converse, where
//! a recipient holds one conversation per time window, and notify-then-fetch,
//! where every message costs a fixed pipeline latency plus round queueing.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Geometric};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub sender: u32,
    pub receiver: u32,
    pub ts: i64,
}

/// Time-sorted messages with dense user ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MsgTrace {
    pub records: Vec<TraceRecord>,
    pub users: usize,
}

impl MsgTrace {
    /// Parses `SRC DST UNIXTIME` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<MsgTrace, TraceError> {
        let mut raw = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let mut field = |name: &str| -> Result<i64, TraceError> {
                let tok = it.next().ok_or_else(|| TraceError::Parse {
                    line: i + 1,
                    reason: format!("missing {name}"),
                })?;
                tok.parse().map_err(|_| TraceError::Parse {
                    line: i + 1,
                    reason: format!("bad {name} {tok:?}"),
                })
            };
            let (s, d, t) = (field("sender")?, field("receiver")?, field("timestamp")?);
            if it.next().is_some() {
                return Err(TraceError::Parse {
                    line: i + 1,
                    reason: "expected 3 fields".into(),
                });
            }
            raw.push((s, d, t));
        }
        Ok(Self::from_raw(raw))
    }

    /// Sorts by time (stable) and maps ids densely in order of appearance.
    pub fn from_raw(mut raw: Vec<(i64, i64, i64)>) -> MsgTrace {
        raw.sort_by_key(|r| r.2);
        let mut ids: HashMap<i64, u32> = HashMap::new();
        let mut dense = |x: i64| {
            let n = ids.len() as u32;
            *ids.entry(x).or_insert(n)
        };
        let records = raw
            .into_iter()
            .map(|(s, d, t)| TraceRecord {
                sender: dense(s),
                receiver: dense(d),
                ts: t,
            })
            .collect();
        MsgTrace {
            records,
            users: ids.len(),
        }
    }

    pub fn load(path: &Path) -> Result<MsgTrace, TraceError> {
        let text = fs::read_to_string(path).map_err(|source| TraceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for r in &self.records {
            writeln!(f, "{} {} {}", r.sender, r.receiver, r.ts)?;
        }
        f.flush()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Bursty synthetic trace: conversations start as a Poisson process between
/// Zipf-weighted users, each a geometric burst of messages in both directions.
pub fn synthetic_trace(users: usize, messages: usize, span_s: i64, seed: u64) -> MsgTrace {
    assert!(users >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (1..=users).map(|i| 1.0 / (i as f64).powf(0.8)).collect();
    let total: f64 = weights.iter().sum();
    let pick = |rng: &mut ChaCha8Rng| {
        let mut x = rng.gen::<f64>() * total;
        for (i, w) in weights.iter().enumerate() {
            x -= w;
            if x <= 0.0 {
                return i as i64;
            }
        }
        users as i64 - 1
    };
    let burst = Geometric::new(1.0 / 3.0).expect("valid p");
    let gap = Exp::new(1.0 / 40.0).expect("valid rate");
    let convs = (messages / 3).max(1);
    let start = Exp::new(convs as f64 / span_s as f64).expect("valid rate");
    let mut raw = Vec::with_capacity(messages);
    let mut t = 1_082_000_000f64;
    while raw.len() < messages {
        t += start.sample(&mut rng);
        let a = pick(&mut rng);
        let mut b = pick(&mut rng);
        while b == a {
            b = rng.gen_range(0..users as i64);
        }
        let mut ts = t;
        for _ in 0..=burst.sample(&mut rng) {
            if raw.len() == messages {
                break;
            }
            let (s, d) = if rng.gen_bool(0.6) { (a, b) } else { (b, a) };
            raw.push((s, d, ts as i64));
            ts += gap.sample(&mut rng);
        }
    }
    MsgTrace::from_raw(raw)
}

#[derive(Clone, Debug, Serialize)]
pub struct DialResult {
    pub window_s: f64,
    pub messages: usize,
    pub conversations: usize,
    pub waited_conversations: usize,
    pub conflict_fraction: f64,
    pub avg_latency: f64,
    #[serde(skip)]
    pub latencies: Vec<f64>,
}

/// Dial-then-converse replay.
///
/// Time is cut into windows of `window_s`. A conversation (sender, recipient)
/// occupies one whole window of the recipient. A message joins its pair's
/// conversation if one is booked for the current window or later; otherwise
/// it books the recipient's next free window, waiting if that window is not
/// the current one. Only recipients block.
pub fn simulate_dial(trace: &MsgTrace, window_s: f64, dial_latency_s: f64, conv_latency_s: f64) -> DialResult {
    assert!(window_s > 0.0);
    let mut next_free: HashMap<u32, i64> = HashMap::new();
    let mut booked: HashMap<(u32, u32), i64> = HashMap::new();
    let mut latencies = Vec::with_capacity(trace.len());
    let (mut convs, mut waited) = (0usize, 0usize);
    for r in &trace.records {
        let t = r.ts as f64;
        let cur = (t / window_s).floor() as i64;
        let slot = match booked.get(&(r.receiver, r.sender)) {
            Some(&b) if b >= cur => b,
            _ => {
                let nf = next_free.entry(r.receiver).or_insert(i64::MIN);
                let b = cur.max(*nf);
                *nf = b + 1;
                booked.insert((r.receiver, r.sender), b);
                convs += 1;
                if b > cur {
                    waited += 1;
                }
                b
            }
        };
        let wait = (slot as f64 * window_s - t).max(0.0);
        latencies.push(wait + dial_latency_s + conv_latency_s);
    }
    DialResult {
        window_s,
        messages: trace.len(),
        conversations: convs,
        waited_conversations: waited,
        conflict_fraction: if convs == 0 { 0.0 } else { waited as f64 / convs as f64 },
        avg_latency: mean(&latencies),
        latencies,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct NotifyResult {
    pub proc_latency_s: f64,
    pub round_s: f64,
    pub messages: usize,
    pub avg_latency: f64,
    pub max_latency: f64,
    /// Messages that waited at least one extra round in a queue.
    pub queued_messages: usize,
    #[serde(skip)]
    pub latencies: Vec<f64>,
}

/// Notify-then-fetch replay. A message enters at the next round boundary,
/// leaves in the sender's first free send slot (one message per round) and
/// is fetched in the recipient's first free read slot (one read per round).
/// Latency is the fixed pipeline cost plus alignment and queueing.
pub fn simulate_notify(trace: &MsgTrace, proc_latency_s: f64, round_s: f64) -> NotifyResult {
    assert!(round_s > 0.0);
    let mut next_send: HashMap<u32, i64> = HashMap::new();
    let mut next_read: HashMap<u32, i64> = HashMap::new();
    let mut latencies = Vec::with_capacity(trace.len());
    let mut queued = 0;
    for r in &trace.records {
        let t = r.ts as f64;
        let r0 = (t / round_s).ceil() as i64;
        let ns = next_send.entry(r.sender).or_insert(i64::MIN);
        let send = r0.max(*ns);
        *ns = send + 1;
        let nr = next_read.entry(r.receiver).or_insert(i64::MIN);
        let read = send.max(*nr);
        *nr = read + 1;
        if read > r0 {
            queued += 1;
        }
        latencies.push(proc_latency_s + read as f64 * round_s - t);
    }
    NotifyResult {
        proc_latency_s,
        round_s,
        messages: trace.len(),
        avg_latency: mean(&latencies),
        max_latency: latencies.iter().copied().fold(0.0, f64::max),
        queued_messages: queued,
        latencies,
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// `lo,hi,count` rows over equal-width bins.
pub fn latency_histogram_csv(latencies: &[f64], bins: usize) -> String {
    let mut out = String::from("lo,hi,count\n");
    if latencies.is_empty() || bins == 0 {
        return out;
    }
    let max = latencies.iter().copied().fold(0.0, f64::max);
    let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &l in latencies {
        counts[((l / width) as usize).min(bins - 1)] += 1;
    }
    for (i, c) in counts.iter().enumerate() {
        out.push_str(&format!("{:.3},{:.3},{}\n", i as f64 * width, (i + 1) as f64 * width, c));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(lines: &[(i64, i64, i64)]) -> MsgTrace {
        MsgTrace::from_raw(lines.to_vec())
    }

    #[test]
    fn parse_and_sort() {
        let t = MsgTrace::parse("5 6 300\n# c\n\n6 5 100\n7 5 200\n").unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.users, 3);
        let ts: Vec<i64> = t.records.iter().map(|r| r.ts).collect();
        assert_eq!(ts, vec![100, 200, 300]);
        // first appearance after sorting: 6 -> 0, 5 -> 1, 7 -> 2
        assert_eq!((t.records[0].sender, t.records[0].receiver), (0, 1));
        assert!(MsgTrace::parse("").unwrap().is_empty());
    }

    #[test]
    fn parse_errors_carry_line() {
        match MsgTrace::parse("1 2 3\n1 x 3\n") {
            Err(TraceError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(MsgTrace::parse("1 2\n").is_err());
        assert!(MsgTrace::parse("1 2 3 4\n").is_err());
    }

    #[test]
    fn dial_single_message() {
        let r = simulate_dial(&trace(&[(1, 2, 1000)]), 300.0, 0.0, 0.5);
        assert_eq!(r.avg_latency, 0.5);
        assert_eq!(r.conflict_fraction, 0.0);
    }

    #[test]
    fn dial_second_sender_waits_a_window() {
        let r = simulate_dial(&trace(&[(1, 3, 0), (2, 3, 0)]), 300.0, 0.0, 0.5);
        assert_eq!(r.latencies[0], 0.5);
        assert!(r.latencies[1] >= 300.0);
        assert_eq!(r.waited_conversations, 1);
        assert_eq!(r.conflict_fraction, 0.5);
    }

    #[test]
    fn dial_same_pair_joins_conversation() {
        let r = simulate_dial(&trace(&[(1, 3, 0), (2, 3, 10), (2, 3, 20)]), 300.0, 0.0, 0.5);
        assert_eq!(r.conversations, 2);
        assert_eq!(r.latencies[1], 290.5);
        assert_eq!(r.latencies[2], 280.5);
    }

    #[test]
    fn notify_single_and_burst() {
        let r = simulate_notify(&trace(&[(1, 2, 100)]), 3.0, 1.0);
        assert_eq!(r.avg_latency, 3.0);
        let burst: Vec<_> = (0..10).map(|i| (i + 10, 1, 100)).collect();
        let r = simulate_notify(&trace(&burst), 3.0, 1.0);
        // ten senders, one reader: one fetch per round
        let mut l = r.latencies.clone();
        l.sort_by(f64::total_cmp);
        assert_eq!(l, (0..10).map(|i| 3.0 + i as f64).collect::<Vec<_>>());
        assert_eq!(r.queued_messages, 9);
    }

    #[test]
    fn notify_alignment_residual() {
        let r = simulate_notify(&trace(&[(1, 2, 10)]), 3.0, 4.0);
        assert_eq!(r.avg_latency, 5.0);
    }

    #[test]
    fn synthetic_shape() {
        let t = synthetic_trace(40, 500, 6 * 3600, 1);
        assert_eq!(t.len(), 500);
        assert!(t.users <= 40 && t.users > 10);
        assert!(t.records.windows(2).all(|w| w[0].ts <= w[1].ts));
        assert!(t.records.iter().all(|r| r.sender != r.receiver));
    }

    #[test]
    fn histogram_rows() {
        let csv = latency_histogram_csv(&[0.5, 1.0, 2.0], 2);
        assert_eq!(csv.lines().count(), 3);
    }
}
