//! Run settings shared by the subcommands.

use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use kforge_core::bench::{BenchOptions, GatePolicy, DEFAULT_ITERS, DEFAULT_WARMUP};
use kforge_core::pipeline::PipelineOptions;
use kforge_core::transport::{LocalProcess, RemoteDevice, Transport};
use kforge_core::verify::{ToleranceMode, VerifyOptions, DEFAULT_TOLERANCE};

/// Where the runner executes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportSpec {
    Local,
    /// `None` lets the bridge pick its only attached device.
    Device(Option<String>),
}

impl FromStr for TransportSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local" => Ok(TransportSpec::Local),
            "device" => Ok(TransportSpec::Device(None)),
            _ => match s.strip_prefix("device:") {
                Some("") => Ok(TransportSpec::Device(None)),
                Some(serial) => Ok(TransportSpec::Device(Some(serial.to_string()))),
                None => Err(format!("expected `local` or `device:<serial>`, got `{s}`")),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub transport: TransportSpec,
    /// Bridge executable for device transports.
    pub bridge: PathBuf,
    /// Staging directory: local path or remote path, depending on the transport.
    pub staging: Option<String>,
    pub tolerance: f64,
    pub relative_tolerance: bool,
    pub iters: u32,
    pub warmup: u32,
    pub bench: bool,
    pub util_gate: bool,
    pub util_threshold: f64,
    pub jobs: usize,
    pub max_iters: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            transport: TransportSpec::Local,
            bridge: PathBuf::from("adb"),
            staging: None,
            tolerance: DEFAULT_TOLERANCE,
            relative_tolerance: false,
            iters: DEFAULT_ITERS,
            warmup: DEFAULT_WARMUP,
            bench: true,
            util_gate: true,
            util_threshold: GatePolicy::default().threshold,
            jobs: 1,
            max_iters: 10,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            bail!("tolerance must be a positive number, got {}", self.tolerance);
        }
        if self.iters < 1 {
            bail!("iters must be at least 1");
        }
        if self.jobs < 1 {
            bail!("jobs must be at least 1");
        }
        if self.max_iters < 1 {
            bail!("max-iters must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.util_threshold) || self.util_threshold == 0.0 {
            bail!("util-threshold must be in (0, 1], got {}", self.util_threshold);
        }
        if !self.bench && self.transport != TransportSpec::Local {
            bail!("--no-bench is only available with the local transport");
        }
        Ok(())
    }

    pub fn bench_options(&self) -> BenchOptions {
        BenchOptions {
            iters: self.iters,
            warmup: self.warmup,
            gate: self.util_gate.then(|| GatePolicy {
                threshold: self.util_threshold,
                ..GatePolicy::default()
            }),
        }
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions {
            verify: VerifyOptions {
                tolerance: self.tolerance,
                mode: if self.relative_tolerance {
                    ToleranceMode::Relative
                } else {
                    ToleranceMode::Absolute
                },
            },
            bench: self.bench.then(|| self.bench_options()),
            ..PipelineOptions::default()
        }
    }

    pub fn open_transport(&self) -> Result<Box<dyn Transport>> {
        Ok(match &self.transport {
            TransportSpec::Local => {
                let staging = self
                    .staging
                    .as_ref()
                    .map(PathBuf::from)
                    .unwrap_or_else(|| std::env::temp_dir().join("kforge-staging"));
                std::fs::create_dir_all(&staging)
                    .with_context(|| format!("creating staging directory {}", staging.display()))?;
                Box::new(LocalProcess::new(staging))
            }
            TransportSpec::Device(serial) => {
                let mut d = RemoteDevice::new(&self.bridge, serial.clone());
                if let Some(s) = &self.staging {
                    d = d.with_staging(s.clone());
                }
                Box::new(d)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transport_specs() {
        assert_eq!("local".parse(), Ok(TransportSpec::Local));
        assert_eq!("device".parse(), Ok(TransportSpec::Device(None)));
        assert_eq!("device:".parse(), Ok(TransportSpec::Device(None)));
        assert_eq!("device:R58M".parse(), Ok(TransportSpec::Device(Some("R58M".into()))));
        assert!("usb".parse::<TransportSpec>().is_err());
    }

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.tolerance, 1e-4);
        assert_eq!(c.iters, 100);
        assert_eq!(c.warmup, 5);
        assert_eq!(c.max_iters, 10);
    }

    #[test]
    fn invariants_enforced() {
        let bad = [
            RunConfig { tolerance: 0.0, ..RunConfig::default() },
            RunConfig { tolerance: f64::NAN, ..RunConfig::default() },
            RunConfig { iters: 0, ..RunConfig::default() },
            RunConfig { jobs: 0, ..RunConfig::default() },
            RunConfig { max_iters: 0, ..RunConfig::default() },
            RunConfig { util_threshold: 0.0, ..RunConfig::default() },
            RunConfig {
                bench: false,
                transport: TransportSpec::Device(None),
                ..RunConfig::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn no_bench_drops_benchmark_stage() {
        let c = RunConfig { bench: false, ..RunConfig::default() };
        assert!(c.pipeline_options().bench.is_none());
        let c = RunConfig { util_gate: false, ..RunConfig::default() };
        assert!(c.pipeline_options().bench.unwrap().gate.is_none());
    }
}
