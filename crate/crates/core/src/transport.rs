//! Moving tensors to wherever the runner executes, running it, and sampling
//! device load.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::process::{run_captured, shell_quote};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    LocalProcess,
    RemoteDevice,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecOutput {
    /// `None` when the process was killed (signal or timeout).
    pub status: Option<i32>,
    pub stdout: String,
    pub stderr: String,
}

impl ExecOutput {
    pub fn success(&self) -> bool {
        self.status == Some(0)
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("{0} not found on target")]
    NotFound(String),
    #[error("`{command}` failed: {detail}")]
    CommandFailed { command: String, detail: String },
    #[error("utilization unavailable: {0}")]
    Utilization(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Where the runner executes. Remote paths are plain strings because they
/// name locations on another machine.
pub trait Transport: Send + Sync {
    fn kind(&self) -> TransportKind;
    /// Stable name for this endpoint, used to key cached baselines.
    fn endpoint_id(&self) -> String;
    fn staging_dir(&self) -> String;
    fn push(&self, local: &Path, remote: &str) -> Result<(), TransportError>;
    fn pull(&self, remote: &str, local: &Path) -> Result<(), TransportError>;
    fn exec(&self, argv: &[String]) -> Result<ExecOutput, TransportError>;
    /// Remove `remote` if present and create it empty.
    fn reset_dir(&self, remote: &str) -> Result<(), TransportError>;
    /// Fraction of total compute capacity in use, in `[0, 1]`.
    fn utilization(&self) -> Result<f64, TransportError>;
    /// Make the runner executable on the target under `remote_dir`; returns
    /// the path to invoke.
    fn stage_runner(&self, local_runner: &Path, remote_dir: &str) -> Result<String, TransportError>;
    /// Held for the duration of a timed run so measurements do not overlap.
    fn endpoint_lock(&self) -> &Mutex<()>;
}

pub fn join_remote(dir: &str, name: &str) -> String {
    format!("{}/{}", dir.trim_end_matches('/'), name)
}

/// Runs on this machine; "remote" paths are local paths.
pub struct LocalProcess {
    staging: PathBuf,
    exec_timeout: Duration,
    lock: Mutex<()>,
}

impl LocalProcess {
    pub fn new(staging: impl Into<PathBuf>) -> Self {
        LocalProcess {
            staging: staging.into(),
            exec_timeout: Duration::from_secs(300),
            lock: Mutex::new(()),
        }
    }

    pub fn with_exec_timeout(mut self, t: Duration) -> Self {
        self.exec_timeout = t;
        self
    }
}

fn copy_checked(from: &Path, to: &Path) -> Result<(), TransportError> {
    if !from.exists() {
        return Err(TransportError::NotFound(from.display().to_string()));
    }
    if let Some(parent) = to.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::copy(from, to)?;
    Ok(())
}

fn exec_local(argv: &[String], cwd: Option<&Path>, limit: Duration) -> Result<ExecOutput, TransportError> {
    let (prog, args) = argv.split_first().ok_or_else(|| TransportError::CommandFailed {
        command: String::new(),
        detail: "empty argv".into(),
    })?;
    let mut cmd = Command::new(prog);
    cmd.args(args);
    if let Some(dir) = cwd {
        cmd.current_dir(dir);
    }
    let c = run_captured(&mut cmd, limit)?;
    Ok(ExecOutput {
        status: c.status.and_then(|s| s.code()),
        stdout: c.stdout,
        stderr: c.stderr,
    })
}

impl Transport for LocalProcess {
    fn kind(&self) -> TransportKind {
        TransportKind::LocalProcess
    }

    fn endpoint_id(&self) -> String {
        "local".into()
    }

    fn staging_dir(&self) -> String {
        self.staging.display().to_string()
    }

    fn push(&self, local: &Path, remote: &str) -> Result<(), TransportError> {
        copy_checked(local, Path::new(remote))
    }

    fn pull(&self, remote: &str, local: &Path) -> Result<(), TransportError> {
        copy_checked(Path::new(remote), local)
    }

    fn exec(&self, argv: &[String]) -> Result<ExecOutput, TransportError> {
        exec_local(argv, Some(&self.staging), self.exec_timeout)
    }

    fn reset_dir(&self, remote: &str) -> Result<(), TransportError> {
        let p = Path::new(remote);
        if p.exists() {
            fs::remove_dir_all(p)?;
        }
        fs::create_dir_all(p)?;
        Ok(())
    }

    fn utilization(&self) -> Result<f64, TransportError> {
        let a = fs::read_to_string("/proc/stat")?;
        std::thread::sleep(Duration::from_millis(200));
        let b = fs::read_to_string("/proc/stat")?;
        utilization_between(&a, &b)
    }

    fn stage_runner(&self, local_runner: &Path, _remote_dir: &str) -> Result<String, TransportError> {
        if !local_runner.exists() {
            return Err(TransportError::NotFound(local_runner.display().to_string()));
        }
        Ok(local_runner.display().to_string())
    }

    fn endpoint_lock(&self) -> &Mutex<()> {
        &self.lock
    }
}

/// (busy, total) jiffies from the aggregate `cpu` line of `/proc/stat`.
fn cpu_times(stat: &str) -> Result<(u64, u64), TransportError> {
    let line = stat
        .lines()
        .find(|l| l.starts_with("cpu "))
        .ok_or_else(|| TransportError::Utilization("no aggregate cpu line".into()))?;
    let fields: Vec<u64> = line
        .split_whitespace()
        .skip(1)
        .map(|f| f.parse::<u64>())
        .collect::<Result<_, _>>()
        .map_err(|e| TransportError::Utilization(e.to_string()))?;
    if fields.len() < 4 {
        return Err(TransportError::Utilization("short cpu line".into()));
    }
    // guest time is already folded into user/nice
    let total: u64 = fields.iter().take(8).sum();
    let idle = fields[3] + fields.get(4).copied().unwrap_or(0);
    Ok((total - idle, total))
}

/// Busy fraction between two `/proc/stat` snapshots.
pub fn utilization_between(before: &str, after: &str) -> Result<f64, TransportError> {
    let (b0, t0) = cpu_times(before)?;
    let (b1, t1) = cpu_times(after)?;
    let dt = t1.saturating_sub(t0);
    if dt == 0 {
        return Ok(0.0);
    }
    Ok((b1.saturating_sub(b0) as f64 / dt as f64).clamp(0.0, 1.0))
}

/// A device reached through a bridge tool with `push`, `pull` and `shell`
/// subcommands (adb-style).
pub struct RemoteDevice {
    bridge: PathBuf,
    serial: Option<String>,
    staging: String,
    exec_timeout: Duration,
    lock: Mutex<()>,
}

pub const DEFAULT_REMOTE_STAGING: &str = "/data/local/tmp/kforge";

impl RemoteDevice {
    pub fn new(bridge: impl Into<PathBuf>, serial: Option<String>) -> Self {
        RemoteDevice {
            bridge: bridge.into(),
            serial,
            staging: DEFAULT_REMOTE_STAGING.into(),
            exec_timeout: Duration::from_secs(300),
            lock: Mutex::new(()),
        }
    }

    pub fn with_staging(mut self, dir: impl Into<String>) -> Self {
        self.staging = dir.into();
        self
    }

    fn bridge_argv(&self, rest: &[&str]) -> Vec<String> {
        let mut v = vec![self.bridge.display().to_string()];
        if let Some(s) = &self.serial {
            v.push("-s".into());
            v.push(s.clone());
        }
        v.extend(rest.iter().map(|s| s.to_string()));
        v
    }

    fn bridge(&self, rest: &[&str]) -> Result<ExecOutput, TransportError> {
        exec_local(&self.bridge_argv(rest), None, self.exec_timeout)
    }

    fn shell(&self, script: &str) -> Result<ExecOutput, TransportError> {
        let out = self.bridge(&["shell", script])?;
        if !out.success() {
            return Err(TransportError::CommandFailed {
                command: script.into(),
                detail: format!("{}{}", out.stdout, out.stderr),
            });
        }
        Ok(out)
    }
}

impl Transport for RemoteDevice {
    fn kind(&self) -> TransportKind {
        TransportKind::RemoteDevice
    }

    fn endpoint_id(&self) -> String {
        format!("device:{}", self.serial.as_deref().unwrap_or("default"))
    }

    fn staging_dir(&self) -> String {
        self.staging.clone()
    }

    fn push(&self, local: &Path, remote: &str) -> Result<(), TransportError> {
        if !local.exists() {
            return Err(TransportError::NotFound(local.display().to_string()));
        }
        let l = local.display().to_string();
        let out = self.bridge(&["push", &l, remote])?;
        if !out.success() {
            return Err(TransportError::CommandFailed {
                command: format!("push {l} {remote}"),
                detail: out.stderr,
            });
        }
        Ok(())
    }

    fn pull(&self, remote: &str, local: &Path) -> Result<(), TransportError> {
        let l = local.display().to_string();
        let out = self.bridge(&["pull", remote, &l])?;
        if out.success() {
            return Ok(());
        }
        let msg = format!("{}{}", out.stdout, out.stderr);
        if msg.contains("does not exist") || msg.contains("No such file") {
            Err(TransportError::NotFound(remote.into()))
        } else {
            Err(TransportError::CommandFailed {
                command: format!("pull {remote}"),
                detail: msg,
            })
        }
    }

    fn exec(&self, argv: &[String]) -> Result<ExecOutput, TransportError> {
        let script = format!(
            "cd {} && {}",
            shell_quote(&self.staging),
            argv.iter().map(|a| shell_quote(a)).collect::<Vec<_>>().join(" ")
        );
        self.bridge(&["shell", &script])
    }

    fn reset_dir(&self, remote: &str) -> Result<(), TransportError> {
        let q = shell_quote(remote);
        self.shell(&format!("rm -rf {q} && mkdir -p {q}")).map(|_| ())
    }

    fn utilization(&self) -> Result<f64, TransportError> {
        let out = self.shell("head -n1 /proc/stat; sleep 0.2; head -n1 /proc/stat")?;
        let lines: Vec<&str> = out.stdout.lines().filter(|l| l.starts_with("cpu ")).collect();
        match lines.as_slice() {
            [a, b] => utilization_between(a, b),
            _ => Err(TransportError::Utilization(format!("unexpected output: {}", out.stdout))),
        }
    }

    fn stage_runner(&self, local_runner: &Path, remote_dir: &str) -> Result<String, TransportError> {
        self.shell(&format!("mkdir -p {}", shell_quote(remote_dir)))?;
        let remote = join_remote(remote_dir, "kf_runner");
        self.push(local_runner, &remote)?;
        self.shell(&format!("chmod 755 {}", shell_quote(&remote)))?;
        Ok(remote)
    }

    fn endpoint_lock(&self) -> &Mutex<()> {
        &self.lock
    }
}

/// Test double: staging lives in a local directory and `exec` is answered by
/// a closure, which may write output files into the staging tree.
pub struct ScriptedTransport {
    staging: PathBuf,
    handler: Box<dyn Fn(&[String]) -> ExecOutput + Send + Sync>,
    loads: Mutex<Vec<f64>>,
    calls: Mutex<Vec<Vec<String>>>,
    lock: Mutex<()>,
}

impl ScriptedTransport {
    pub fn new(
        staging: impl Into<PathBuf>,
        handler: impl Fn(&[String]) -> ExecOutput + Send + Sync + 'static,
    ) -> Self {
        ScriptedTransport {
            staging: staging.into(),
            handler: Box::new(handler),
            loads: Mutex::new(vec![0.0]),
            calls: Mutex::new(Vec::new()),
            lock: Mutex::new(()),
        }
    }

    /// Successive utilization readings; the last one repeats.
    pub fn with_loads(self, loads: Vec<f64>) -> Self {
        assert!(!loads.is_empty());
        *self.loads.lock().unwrap() = loads;
        self
    }

    pub fn calls(&self) -> Vec<Vec<String>> {
        self.calls.lock().unwrap().clone()
    }
}

impl Transport for ScriptedTransport {
    fn kind(&self) -> TransportKind {
        TransportKind::LocalProcess
    }

    fn endpoint_id(&self) -> String {
        "scripted".into()
    }

    fn staging_dir(&self) -> String {
        self.staging.display().to_string()
    }

    fn push(&self, local: &Path, remote: &str) -> Result<(), TransportError> {
        copy_checked(local, Path::new(remote))
    }

    fn pull(&self, remote: &str, local: &Path) -> Result<(), TransportError> {
        copy_checked(Path::new(remote), local)
    }

    fn exec(&self, argv: &[String]) -> Result<ExecOutput, TransportError> {
        self.calls.lock().unwrap().push(argv.to_vec());
        Ok((self.handler)(argv))
    }

    fn reset_dir(&self, remote: &str) -> Result<(), TransportError> {
        let p = Path::new(remote);
        if p.exists() {
            fs::remove_dir_all(p)?;
        }
        fs::create_dir_all(p)?;
        Ok(())
    }

    fn utilization(&self) -> Result<f64, TransportError> {
        let mut loads = self.loads.lock().unwrap();
        Ok(if loads.len() > 1 { loads.remove(0) } else { loads[0] })
    }

    fn stage_runner(&self, local_runner: &Path, _remote_dir: &str) -> Result<String, TransportError> {
        Ok(local_runner.display().to_string())
    }

    fn endpoint_lock(&self) -> &Mutex<()> {
        &self.lock
    }
}

/// Command line for one runner invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunnerInvocation {
    pub runner: String,
    pub op: String,
    pub inputs: Vec<String>,
    pub attrs: Vec<(String, String)>,
    pub out_dir: String,
    pub iters: u32,
    pub warmup: u32,
    /// Ask for the graph description instead of computing.
    pub inspect: bool,
}

impl RunnerInvocation {
    pub fn argv(&self) -> Vec<String> {
        let mut v = vec![self.runner.clone(), "--op".into(), self.op.clone()];
        for i in &self.inputs {
            v.push("--input".into());
            v.push(i.clone());
        }
        for (k, val) in &self.attrs {
            v.push("--attr".into());
            v.push(format!("{k}={val}"));
        }
        v.push("--out-dir".into());
        v.push(self.out_dir.clone());
        v.push("--iters".into());
        v.push(self.iters.to_string());
        v.push("--warmup".into());
        v.push(self.warmup.to_string());
        if self.inspect {
            v.push("--inspect".into());
        }
        v
    }
}
