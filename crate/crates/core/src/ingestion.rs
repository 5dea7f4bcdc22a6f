//! Raw interaction logs: MIND and Zhihu parsers, a round-trippable TSV form,
//! and a seeded planted-signal generator.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use chrono::NaiveDateTime;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    Click(String),
    Slate(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Event {
    pub timestamp: i64,
    pub kind: EventKind,
}

impl Event {
    pub fn click(timestamp: i64, item: impl Into<String>) -> Self {
        Self { timestamp, kind: EventKind::Click(item.into()) }
    }

    pub fn slate(timestamp: i64, items: Vec<String>) -> Self {
        Self { timestamp, kind: EventKind::Slate(items) }
    }
}

/// Per-user event streams, each sorted by timestamp (stable, so events with
/// equal timestamps keep their insertion order).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionLog {
    users: BTreeMap<String, Vec<Event>>,
}

impl InteractionLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, user: &str, event: Event) -> Result<()> {
        if let EventKind::Slate(items) = &event.kind {
            if items.is_empty() {
                return Err(Error::Config(format!("empty impression slate for user {user}")));
            }
        }
        let events = self.users.entry(user.to_string()).or_default();
        // Keep sorted on insertion; logs are nearly always appended in order.
        let pos = events.partition_point(|e| e.timestamp <= event.timestamp);
        events.insert(pos, event);
        Ok(())
    }

    pub fn users(&self) -> impl Iterator<Item = (&str, &[Event])> {
        self.users.iter().map(|(u, e)| (u.as_str(), e.as_slice()))
    }

    pub fn events(&self, user: &str) -> Option<&[Event]> {
        self.users.get(user).map(Vec::as_slice)
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.values().all(Vec::is_empty)
    }

    pub fn num_clicks(&self) -> usize {
        self.all_events().filter(|e| matches!(e.kind, EventKind::Click(_))).count()
    }

    pub fn num_slates(&self) -> usize {
        self.all_events().filter(|e| matches!(e.kind, EventKind::Slate(_))).count()
    }

    /// Total number of impressed items over all slates.
    pub fn num_impressions(&self) -> usize {
        self.all_events()
            .map(|e| match &e.kind {
                EventKind::Slate(items) => items.len(),
                EventKind::Click(_) => 0,
            })
            .sum()
    }

    fn all_events(&self) -> impl Iterator<Item = &Event> {
        self.users.values().flatten()
    }

    /// One event per line: `user TAB timestamp TAB c|s TAB items` with slate
    /// items comma-separated.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for (user, events) in &self.users {
            for e in events {
                match &e.kind {
                    EventKind::Click(item) => writeln!(w, "{user}\t{}\tc\t{item}", e.timestamp)?,
                    EventKind::Slate(items) => writeln!(w, "{user}\t{}\ts\t{}", e.timestamp, items.join(","))?,
                }
            }
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut log = InteractionLog::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(parse_err(lineno, format!("expected 4 fields, found {}", fields.len())));
            }
            let ts: i64 = fields[1].parse().map_err(|_| parse_err(lineno, "bad timestamp"))?;
            let event = match fields[2] {
                "c" => Event::click(ts, fields[3]),
                "s" => Event::slate(ts, fields[3].split(',').map(str::to_string).collect()),
                other => return Err(parse_err(lineno, format!("unknown event kind `{other}`"))),
            };
            log.push(fields[0], event).map_err(|e| parse_err(lineno, e.to_string()))?;
        }
        Ok(log)
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn parse_mind_time(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    NaiveDateTime::parse_from_str(s, "%m/%d/%Y %I:%M:%S %p")
        .ok()
        .map(|t| t.and_utc().timestamp())
}

/// Parses a MIND `behaviors.tsv` stream.
///
/// Each line is `impression_id TAB user_id TAB time TAB history TAB impressions`.
/// MIND restates a user's pre-period click history on every impression line,
/// so history clicks are recorded once per user: the first line emits the
/// whole history, later lines emit only items that extend it. History items
/// get strictly increasing synthetic timestamps ending one second before the
/// impression. Impression entries end in `-1` (clicked, also emitted as a
/// click at the impression time) or `-0`.
pub fn parse_mind<R: BufRead>(reader: R) -> Result<InteractionLog> {
    let mut log = InteractionLog::new();
    let mut histories: HashMap<String, Vec<String>> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(parse_err(lineno, format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        let user = fields[1];
        if user.is_empty() {
            return Err(parse_err(lineno, "empty user id"));
        }
        let time = parse_mind_time(fields[2]).ok_or_else(|| parse_err(lineno, format!("bad time `{}`", fields[2])))?;

        let history: Vec<String> = fields[3].split_whitespace().map(str::to_string).collect();
        let recorded = histories.entry(user.to_string()).or_default();
        let new_from = if history.starts_with(recorded) { recorded.len() } else { 0 };
        let h = history.len() as i64;
        for (k, item) in history.iter().enumerate().skip(new_from) {
            log.push(user, Event::click(time - (h - k as i64), item.as_str()))?;
        }
        if history.len() > recorded.len() || new_from == 0 {
            *recorded = history;
        }

        let mut slate = Vec::new();
        let mut clicked = Vec::new();
        for entry in fields[4].split_whitespace() {
            let (item, label) = entry
                .rsplit_once('-')
                .ok_or_else(|| parse_err(lineno, format!("impression entry `{entry}` lacks a -0/-1 suffix")))?;
            match label {
                "1" => clicked.push(item.to_string()),
                "0" => {}
                other => return Err(parse_err(lineno, format!("unknown impression suffix `-{other}`"))),
            }
            slate.push(item.to_string());
        }
        if slate.is_empty() {
            return Err(parse_err(lineno, "empty impression list"));
        }
        log.push(user, Event::slate(time, slate))?;
        for item in clicked {
            log.push(user, Event::click(time, item))?;
        }
    }
    Ok(log)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ZhihuStats {
    pub records: usize,
    /// Records whose click time precedes their show time.
    pub rejected: usize,
}

/// Parses `user TAB item TAB show_time TAB click_time` records, where a
/// click time of `0` marks a non-click. Shows sharing `(user, show_time)`
/// form one slate.
pub fn parse_zhihu<R: BufRead>(reader: R) -> Result<(InteractionLog, ZhihuStats)> {
    let mut stats = ZhihuStats::default();
    let mut slates: BTreeMap<(String, i64), Vec<String>> = BTreeMap::new();
    let mut clicks: Vec<(String, i64, String)> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(lineno, format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let show: i64 = fields[2].trim().parse().map_err(|_| parse_err(lineno, "bad show_time"))?;
        let click: i64 = fields[3].trim().parse().map_err(|_| parse_err(lineno, "bad click_time"))?;
        stats.records += 1;
        if click != 0 && click < show {
            stats.rejected += 1;
            continue;
        }
        let (user, item) = (fields[0].to_string(), fields[1].to_string());
        slates.entry((user.clone(), show)).or_default().push(item.clone());
        if click != 0 {
            clicks.push((user, click, item));
        }
    }
    if stats.rejected > 0 {
        log::warn!("rejected {} record(s) with click_time before show_time", stats.rejected);
    }
    let mut log = InteractionLog::new();
    for ((user, show), items) in slates {
        log.push(&user, Event::slate(show, items))?;
    }
    for (user, ts, item) in clicks {
        log.push(&user, Event::click(ts, item))?;
    }
    Ok((log, stats))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_slates_per_user: usize,
    pub m: usize,
    pub n: usize,
    /// Probability that a slate position carries signal.
    pub signal_strength: f64,
    /// Out-degree of the item-transition graph.
    pub transition_graph_degree: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_items: 500,
            n_slates_per_user: 20,
            m: 5,
            n: 10,
            signal_strength: 0.8,
            transition_graph_degree: 1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return Err(Error::Config(format!("signal strength {} outside [0, 1]", self.signal_strength)));
        }
        if self.n_items <= self.n {
            return Err(Error::Config(format!("n_items ({}) must exceed N ({})", self.n_items, self.n)));
        }
        if self.m == 0 || self.n == 0 || self.n_users == 0 || self.transition_graph_degree == 0 {
            return Err(Error::Config("M, N, n_users and graph degree must be positive".into()));
        }
        if self.transition_graph_degree > self.n_items {
            return Err(Error::Config("graph degree exceeds item count".into()));
        }
        Ok(())
    }
}

/// A generated log together with its planted transition graph.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub log: InteractionLog,
    /// `successors[i]` lists the out-neighbours of synthetic item `i`.
    pub successors: Vec<Vec<usize>>,
}

pub fn synthetic_item_id(i: usize) -> String {
    format!("i{i:05}")
}

pub fn synthetic_user_id(u: usize) -> String {
    format!("u{u:05}")
}

/// Planted-signal corpus.
///
/// The transition graph is the union of `degree` random Hamiltonian cycles,
/// so every item has `degree` successors and the walk's stationary law is
/// uniform. Each user starts at a uniform item and random-walks: `M`
/// warm-up clicks, then alternately one slate and one click. Every slate
/// position is, with probability `signal_strength`, a uniform successor of a
/// uniform pick among the user's `M` most recent clicks, and otherwise a
/// uniform item.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_items = cfg.n_items;
    let mut successors = vec![Vec::with_capacity(cfg.transition_graph_degree); n_items];
    for _ in 0..cfg.transition_graph_degree {
        let mut order: Vec<usize> = (0..n_items).collect();
        order.shuffle(&mut rng);
        for k in 0..n_items {
            successors[order[k]].push(order[(k + 1) % n_items]);
        }
    }

    let mut log = InteractionLog::new();
    for u in 0..cfg.n_users {
        let user = synthetic_user_id(u);
        let mut t: i64 = 0;
        let mut current = rng.gen_range(0..n_items);
        let mut clicks: Vec<usize> = Vec::new();
        let click = |current: &mut usize, t: &mut i64, clicks: &mut Vec<usize>, log: &mut InteractionLog, rng: &mut ChaCha8Rng| -> Result<()> {
            log.push(&user, Event::click(*t, synthetic_item_id(*current)))?;
            clicks.push(*current);
            *t += 1;
            let next = &successors[*current];
            *current = next[rng.gen_range(0..next.len())];
            Ok(())
        };
        for _ in 0..cfg.m {
            click(&mut current, &mut t, &mut clicks, &mut log, &mut rng)?;
        }
        for _ in 0..cfg.n_slates_per_user {
            let recent = &clicks[clicks.len() - cfg.m..];
            let slate: Vec<String> = (0..cfg.n)
                .map(|_| {
                    let item = if rng.gen::<f64>() < cfg.signal_strength {
                        let src = recent[rng.gen_range(0..recent.len())];
                        let nbrs = &successors[src];
                        nbrs[rng.gen_range(0..nbrs.len())]
                    } else {
                        rng.gen_range(0..n_items)
                    };
                    synthetic_item_id(item)
                })
                .collect();
            log.push(&user, Event::slate(t, slate))?;
            t += 1;
            click(&mut current, &mut t, &mut clicks, &mut log, &mut rng)?;
        }
    }
    Ok(SyntheticCorpus { log, successors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mind_line_walkthrough() {
        let data = "i1\tU1\t11/11/2019 9:05:58 AM\tn1 n2\tn3-0 n4-1\n";
        let log = parse_mind(data.as_bytes()).unwrap();
        let events = log.events("U1").unwrap();
        let clicks: Vec<&Event> = events.iter().filter(|e| matches!(e.kind, EventKind::Click(_))).collect();
        assert_eq!(clicks.len(), 3);
        assert_eq!(log.num_slates(), 1);
        assert_eq!(log.num_impressions(), 2);
        let t = parse_mind_time("11/11/2019 9:05:58 AM").unwrap();
        assert_eq!(events[0], Event::click(t - 2, "n1"));
        assert_eq!(events[1], Event::click(t - 1, "n2"));
        assert_eq!(events[2], Event::slate(t, vec!["n3".into(), "n4".into()]));
        assert_eq!(events[3], Event::click(t, "n4"));
    }

    #[test]
    fn mind_empty_history_still_emits_slate() {
        let log = parse_mind("i1\tU1\t100\t\tn3-0 n4-0\n".as_bytes()).unwrap();
        assert_eq!(log.num_clicks(), 0);
        assert_eq!(log.num_slates(), 1);
    }

    #[test]
    fn mind_restated_history_is_recorded_once() {
        let data = "i1\tU1\t100\tn1 n2\tn3-0\ni2\tU1\t200\tn1 n2\tn5-0\ni3\tU1\t300\tn1 n2 n6\tn7-0\n";
        let log = parse_mind(data.as_bytes()).unwrap();
        assert_eq!(log.num_clicks(), 3);
    }

    #[test]
    fn mind_errors_carry_line_numbers() {
        let err = parse_mind("i1\tU1\t100\tn1\tn3-0\ni2\tU1\t100\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_mind("i1\tU1\t100\tn1\tn3-2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        assert!(err.to_string().contains("suffix"));
    }

    #[test]
    fn zhihu_records() {
        let (log, stats) = parse_zhihu("u\ta\t100\t120\nu\tb\t100\t0\nu\tc\t200\t150\n".as_bytes()).unwrap();
        assert_eq!(stats, ZhihuStats { records: 3, rejected: 1 });
        let events = log.events("u").unwrap();
        assert_eq!(events[0], Event::slate(100, vec!["a".into(), "b".into()]));
        assert_eq!(events[1], Event::click(120, "a"));
        assert_eq!(events.len(), 2);
    }

    #[test]
    fn zhihu_non_click_is_show_only() {
        let (log, _) = parse_zhihu("u\ta\t100\t0\n".as_bytes()).unwrap();
        assert_eq!(log.num_clicks(), 0);
        assert_eq!(log.num_impressions(), 1);
    }

    #[test]
    fn synthetic_rejects_bad_config() {
        let cfg = SyntheticConfig { n_items: 10, n: 10, ..Default::default() };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        let cfg = SyntheticConfig { signal_strength: 1.5, ..Default::default() };
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_shaped() {
        let cfg = SyntheticConfig { n_users: 5, n_items: 50, n_slates_per_user: 4, ..Default::default() };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        let (mut wa, mut wb) = (Vec::new(), Vec::new());
        a.log.write_tsv(&mut wa).unwrap();
        b.log.write_tsv(&mut wb).unwrap();
        assert_eq!(wa, wb);
        assert_eq!(a.log.num_slates(), 20);
        assert_eq!(a.log.num_clicks(), 5 * (5 + 4));
        assert!(a.successors.iter().all(|s| s.len() == 1));
    }

    #[test]
    fn full_signal_degree_one_slates_follow_recent_clicks() {
        let cfg = SyntheticConfig {
            n_users: 3,
            n_items: 40,
            n_slates_per_user: 5,
            signal_strength: 1.0,
            ..Default::default()
        };
        let corpus = generate_synthetic(&cfg).unwrap();
        let id = |s: &str| s[1..].parse::<usize>().unwrap();
        for (_, events) in corpus.log.users() {
            let mut clicks = Vec::new();
            for e in events {
                match &e.kind {
                    EventKind::Click(i) => clicks.push(id(i)),
                    EventKind::Slate(items) => {
                        let recent = &clicks[clicks.len() - 5..];
                        for it in items {
                            let it = id(it);
                            assert!(recent.iter().any(|&c| corpus.successors[c][0] == it));
                        }
                    }
                }
            }
        }
    }
}
