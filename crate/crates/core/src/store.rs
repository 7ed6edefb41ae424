//! Durable command log with periodic snapshots.
//!
//! Each accepted command is appended before it runs. The results of any
//! outbound sends it made are appended right after, so recovery can replay the
//! command without contacting external channels a second time. A command
//! whose results never reached disk runs again against the live transport.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::GatewayConfig;
use crate::gateway::{Command, Gateway, GatewayError, Response};
use crate::notifier::{OutboundMessage, Transport};

pub const SNAPSHOT_VERSION: u32 = 1;
const LOG_FILE: &str = "commands.log";
const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreConfig {
    pub data_dir: PathBuf,
    /// Commands between snapshots; 0 disables automatic snapshots.
    pub snapshot_every: u64,
    pub fsync: bool,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            snapshot_every: 1000,
            fsync: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "snake_case")]
enum LogEntry {
    Command { seq: u64, command: Command },
    Outcomes { seq: u64, sends: Vec<Result<(), String>> },
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    version: u32,
    last_seq: u64,
    gateway: Gateway,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Rejected(#[from] GatewayError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt log line {line}: {detail}")]
    Corrupt { line: usize, detail: String },
    #[error("snapshot version {0} is not supported")]
    SnapshotVersion(u32),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error("simulated crash")]
    Crashed,
}

/// Points at which a test can stop a submission, as if the process died.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPoint {
    BeforeAppend,
    AfterAppend,
    AfterExecute,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RecoveryReport {
    pub snapshot_seq: u64,
    pub replayed: u64,
    /// Commands without recorded send results, executed again live.
    pub reexecuted: u64,
    pub torn_tail: bool,
}

struct RecordingTransport<'a> {
    inner: &'a mut dyn Transport,
    sends: Vec<Result<(), String>>,
}

impl Transport for RecordingTransport<'_> {
    fn send(&mut self, msg: &OutboundMessage) -> Result<(), String> {
        let r = self.inner.send(msg);
        self.sends.push(r.clone());
        r
    }
}

struct ReplayTransport {
    sends: std::vec::IntoIter<Result<(), String>>,
}

impl Transport for ReplayTransport {
    fn send(&mut self, _msg: &OutboundMessage) -> Result<(), String> {
        self.sends
            .next()
            .unwrap_or_else(|| Err("no recorded result".to_string()))
    }
}

pub struct Store {
    cfg: StoreConfig,
    gateway: Gateway,
    last_seq: u64,
    since_snapshot: u64,
    log: File,
    recovery: RecoveryReport,
}

impl Store {
    /// Opens or creates the store in `cfg.data_dir`. `config` replaces any
    /// configuration held by the snapshot.
    pub fn open(cfg: StoreConfig, config: GatewayConfig, transport: &mut dyn Transport) -> Result<Self, StoreError> {
        fs::create_dir_all(&cfg.data_dir)?;
        let mut report = RecoveryReport::default();
        let snap_path = cfg.data_dir.join(SNAPSHOT_FILE);
        let (mut gateway, snapshot_seq) = if snap_path.exists() {
            let snap: Snapshot = serde_json::from_reader(BufReader::new(File::open(&snap_path)?))
                .map_err(|e| StoreError::Snapshot(e.to_string()))?;
            if snap.version != SNAPSHOT_VERSION {
                return Err(StoreError::SnapshotVersion(snap.version));
            }
            (snap.gateway, snap.last_seq)
        } else {
            (Gateway::new(config.clone()), 0)
        };
        gateway.set_config(config);
        report.snapshot_seq = snapshot_seq;

        let log_path = cfg.data_dir.join(LOG_FILE);
        let (entries, torn, valid_len) = read_log(&log_path)?;
        report.torn_tail = torn;
        if torn {
            // Drop the partial line so later appends start on a fresh one.
            OpenOptions::new().write(true).open(&log_path)?.set_len(valid_len)?;
        }

        let mut pending: Option<(u64, Command)> = None;
        let mut last_seq = snapshot_seq;
        for entry in entries {
            match entry {
                LogEntry::Command { seq, command } if seq > snapshot_seq => {
                    if let Some((_, c)) = pending.replace((seq, command)) {
                        let _ = gateway.execute(&c, transport);
                        report.replayed += 1;
                        report.reexecuted += 1;
                    }
                    last_seq = seq;
                }
                LogEntry::Outcomes { seq, sends } => {
                    if let Some((_, c)) = pending.take_if(|(s, _)| *s == seq) {
                        let _ = gateway.execute(&c, &mut ReplayTransport { sends: sends.into_iter() });
                        report.replayed += 1;
                    }
                }
                LogEntry::Command { .. } => {}
            }
        }

        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        let mut store = Self {
            cfg,
            gateway,
            last_seq,
            since_snapshot: last_seq - snapshot_seq,
            log,
            recovery: report,
        };
        if let Some((seq, c)) = pending {
            let mut rec = RecordingTransport { inner: transport, sends: Vec::new() };
            let _ = store.gateway.execute(&c, &mut rec);
            let sends = rec.sends;
            store.append(&LogEntry::Outcomes { seq, sends })?;
            store.recovery.replayed += 1;
            store.recovery.reexecuted += 1;
        }
        Ok(store)
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn recovery(&self) -> RecoveryReport {
        self.recovery
    }

    pub fn submit(&mut self, cmd: Command, transport: &mut dyn Transport) -> Result<Response, StoreError> {
        self.submit_inner(cmd, transport, None)
    }

    /// Runs a submission up to `point` and stops there.
    pub fn submit_crashing(
        &mut self,
        cmd: Command,
        transport: &mut dyn Transport,
        point: CrashPoint,
    ) -> Result<Response, StoreError> {
        self.submit_inner(cmd, transport, Some(point))
    }

    fn submit_inner(
        &mut self,
        cmd: Command,
        transport: &mut dyn Transport,
        crash: Option<CrashPoint>,
    ) -> Result<Response, StoreError> {
        self.gateway.validate(&cmd)?;
        if crash == Some(CrashPoint::BeforeAppend) {
            return Err(StoreError::Crashed);
        }
        let seq = self.last_seq + 1;
        self.append(&LogEntry::Command { seq, command: cmd.clone() })?;
        self.last_seq = seq;
        if crash == Some(CrashPoint::AfterAppend) {
            return Err(StoreError::Crashed);
        }
        let mut rec = RecordingTransport { inner: transport, sends: Vec::new() };
        let response = self.gateway.execute(&cmd, &mut rec)?;
        let sends = rec.sends;
        if crash == Some(CrashPoint::AfterExecute) {
            return Err(StoreError::Crashed);
        }
        self.append(&LogEntry::Outcomes { seq, sends })?;
        self.since_snapshot += 1;
        if self.cfg.snapshot_every > 0 && self.since_snapshot >= self.cfg.snapshot_every {
            self.snapshot()?;
        }
        Ok(response)
    }

    fn append(&mut self, entry: &LogEntry) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(entry).expect("log entries serialize");
        line.push('\n');
        self.log.write_all(line.as_bytes())?;
        if self.cfg.fsync {
            self.log.sync_data()?;
        }
        Ok(())
    }

    /// Writes the full state and truncates the log.
    pub fn snapshot(&mut self) -> Result<(), StoreError> {
        let dir = &self.cfg.data_dir;
        let tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        {
            let mut f = File::create(&tmp)?;
            let snap = SnapshotRef {
                version: SNAPSHOT_VERSION,
                last_seq: self.last_seq,
                gateway: &self.gateway,
            };
            serde_json::to_writer(&mut f, &snap).map_err(|e| StoreError::Snapshot(e.to_string()))?;
            if self.cfg.fsync {
                f.sync_all()?;
            }
        }
        fs::rename(&tmp, dir.join(SNAPSHOT_FILE))?;
        self.log = File::create(dir.join(LOG_FILE))?;
        self.since_snapshot = 0;
        tracing::debug!(seq = self.last_seq, "snapshot written");
        Ok(())
    }

    pub fn data_dir(&self) -> &Path {
        &self.cfg.data_dir
    }
}

#[derive(Serialize)]
struct SnapshotRef<'a> {
    version: u32,
    last_seq: u64,
    gateway: &'a Gateway,
}

/// Parses the log. A malformed final line is a torn write and is ignored;
/// a malformed line anywhere else is corruption.
fn read_log(path: &Path) -> Result<(Vec<LogEntry>, bool, u64), StoreError> {
    if !path.exists() {
        return Ok((Vec::new(), false, 0));
    }
    let mut reader = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    let mut buf = String::new();
    let mut offset = 0u64;
    let mut line_no = 0;
    let mut bad: Option<(usize, String, u64)> = None;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if let Some((line, detail, _)) = bad.take() {
            return Err(StoreError::Corrupt { line, detail });
        }
        let complete = buf.ends_with('\n');
        match serde_json::from_str::<LogEntry>(buf.trim_end()) {
            Ok(e) if complete => entries.push(e),
            Ok(_) => bad = Some((line_no, "missing newline".into(), offset)),
            Err(e) => bad = Some((line_no, e.to_string(), offset)),
        }
        offset += n as u64;
    }
    match bad {
        Some((_, _, start)) => Ok((entries, true, start)),
        None => Ok((entries, false, offset)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alerts::{Assignment, RuleMatch, RuleOrigin};
    use crate::gateway::RuleInput;
    use crate::model::Signal;
    use crate::notifier::NullTransport;
    use chrono::{Duration, TimeZone, Utc};
    use serde_json::json;

    fn cfg(dir: &Path, every: u64) -> StoreConfig {
        StoreConfig {
            data_dir: dir.to_path_buf(),
            snapshot_every: every,
            fsync: false,
        }
    }

    fn script() -> Vec<Command> {
        let t0 = Utc.with_ymd_and_hms(2024, 1, 1, 9, 0, 0).unwrap();
        let mut cmds = vec![Command::CreateRule {
            rule: RuleInput {
                rule_id: None,
                user_id: "u1".into(),
                matcher: RuleMatch::default(),
                assign: Assignment::default(),
                enabled: true,
                created_by: RuleOrigin::User,
            },
        }];
        for i in 0..12 {
            let sev = if i % 4 == 0 { "error" } else { "info" };
            cmds.push(Command::Ingest {
                watcher_id: None,
                event: json!({"source": "s", "type": format!("k{}", i % 3), "severity": sev}),
                received_at: t0 + Duration::minutes(i * 7),
            });
        }
        for h in 1..30 {
            cmds.push(Command::Tick { now: t0 + Duration::hours(h) });
        }
        cmds
    }

    /// Fails every other webhook send, so recorded outcomes matter.
    struct Flaky(u32);
    impl Transport for Flaky {
        fn send(&mut self, _: &OutboundMessage) -> Result<(), String> {
            self.0 += 1;
            if self.0.is_multiple_of(2) { Err("status 503".into()) } else { Ok(()) }
        }
    }

    fn reference(cmds: &[Command]) -> Gateway {
        let mut gw = Gateway::new(GatewayConfig::default());
        for c in cmds {
            let _ = gw.execute(c, &mut NullTransport);
        }
        gw
    }

    #[test]
    fn reopen_reproduces_state() {
        for every in [0, 5] {
            let dir = tempfile::tempdir().unwrap();
            let cmds = script();
            {
                let mut s = Store::open(cfg(dir.path(), every), GatewayConfig::default(), &mut NullTransport).unwrap();
                for c in &cmds {
                    s.submit(c.clone(), &mut NullTransport).unwrap();
                }
            }
            let s = Store::open(cfg(dir.path(), every), GatewayConfig::default(), &mut NullTransport).unwrap();
            assert_eq!(s.gateway(), &reference(&cmds));
            assert_eq!(s.last_seq(), cmds.len() as u64);
            assert_eq!(s.recovery().reexecuted, 0);
        }
    }

    #[test]
    fn recorded_send_results_are_replayed_not_resent() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = GatewayConfig::default();
        let cmds = script();
        let prefs = Command::SetPreferences {
            preferences: crate::availability::Preferences {
                channel_order: vec![
                    crate::model::Channel::Webhook { url: "http://127.0.0.1:9/h".into() },
                    crate::model::Channel::Console,
                ],
                ..crate::availability::Preferences::defaults("u1", &config.users)
            },
        };
        config.users.availability_threshold = 0.0;
        let live = {
            let mut s = Store::open(cfg(dir.path(), 0), config.clone(), &mut NullTransport).unwrap();
            let mut flaky = Flaky(0);
            s.submit(prefs, &mut flaky).unwrap();
            for c in &cmds {
                s.submit(c.clone(), &mut flaky).unwrap();
            }
            assert!(flaky.0 > 1);
            s.gateway().clone()
        };
        struct Forbidden;
        impl Transport for Forbidden {
            fn send(&mut self, _: &OutboundMessage) -> Result<(), String> {
                panic!("replay must not send");
            }
        }
        let s = Store::open(cfg(dir.path(), 0), config, &mut Forbidden).unwrap();
        assert_eq!(s.gateway(), &live);
    }

    #[test]
    fn crash_points_recover_to_a_consistent_prefix() {
        let cmds = script();
        for point in [CrashPoint::BeforeAppend, CrashPoint::AfterAppend, CrashPoint::AfterExecute] {
            for crash_at in [3, 13, 20] {
                let dir = tempfile::tempdir().unwrap();
                {
                    let mut s = Store::open(cfg(dir.path(), 4), GatewayConfig::default(), &mut NullTransport).unwrap();
                    for c in &cmds[..crash_at] {
                        s.submit(c.clone(), &mut NullTransport).unwrap();
                    }
                    let r = s.submit_crashing(cmds[crash_at].clone(), &mut NullTransport, point);
                    assert!(matches!(r, Err(StoreError::Crashed)));
                }
                let mut s = Store::open(cfg(dir.path(), 4), GatewayConfig::default(), &mut NullTransport).unwrap();
                let applied = if point == CrashPoint::BeforeAppend { crash_at } else { crash_at + 1 };
                assert_eq!(s.gateway(), &reference(&cmds[..applied]), "{point:?} at {crash_at}");
                for c in &cmds[applied..] {
                    s.submit(c.clone(), &mut NullTransport).unwrap();
                }
                assert_eq!(s.gateway(), &reference(&cmds));
            }
        }
    }

    #[test]
    fn torn_tail_is_ignored_and_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let cmds = script();
        {
            let mut s = Store::open(cfg(dir.path(), 0), GatewayConfig::default(), &mut NullTransport).unwrap();
            for c in &cmds[..5] {
                s.submit(c.clone(), &mut NullTransport).unwrap();
            }
        }
        let log = dir.path().join(LOG_FILE);
        OpenOptions::new().append(true).open(&log).unwrap().write_all(b"{\"entry\":\"comm").unwrap();
        let mut s = Store::open(cfg(dir.path(), 0), GatewayConfig::default(), &mut NullTransport).unwrap();
        assert!(s.recovery().torn_tail);
        assert_eq!(s.gateway(), &reference(&cmds[..5]));
        s.submit(cmds[5].clone(), &mut NullTransport).unwrap();
        drop(s);
        let s = Store::open(cfg(dir.path(), 0), GatewayConfig::default(), &mut NullTransport).unwrap();
        assert!(!s.recovery().torn_tail);
        assert_eq!(s.gateway(), &reference(&cmds[..6]));
    }

    #[test]
    fn corruption_in_the_middle_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(LOG_FILE), "garbage\n{\"entry\":\"outcomes\",\"seq\":1,\"sends\":[]}\n").unwrap();
        let r = Store::open(cfg(dir.path(), 0), GatewayConfig::default(), &mut NullTransport);
        assert!(matches!(r, Err(StoreError::Corrupt { line: 1, .. })));
    }

    #[test]
    fn rejected_commands_are_not_logged() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Store::open(cfg(dir.path(), 0), GatewayConfig::default(), &mut NullTransport).unwrap();
        let bad = Command::Feedback {
            notification_id: "nt-00000009".into(),
            signal: Signal::Acted,
            at: Utc::now(),
            explicit: true,
        };
        assert!(matches!(s.submit(bad, &mut NullTransport), Err(StoreError::Rejected(_))));
        assert_eq!(s.last_seq(), 0);
        assert_eq!(fs::read_to_string(dir.path().join(LOG_FILE)).unwrap(), "");
    }

    #[test]
    fn config_given_at_open_wins_over_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = Store::open(cfg(dir.path(), 1), GatewayConfig::default(), &mut NullTransport).unwrap();
            s.submit(script()[0].clone(), &mut NullTransport).unwrap();
        }
        let mut c = GatewayConfig::default();
        c.triage.window_length_secs = 77;
        let s = Store::open(cfg(dir.path(), 1), c.clone(), &mut NullTransport).unwrap();
        assert_eq!(s.gateway().config(), &c);
        assert_eq!(s.recovery().snapshot_seq, 1);
    }
}
