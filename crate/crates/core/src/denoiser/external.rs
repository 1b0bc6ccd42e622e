use std::io::{BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use super::protocol::{self, ResponseFrame};
use super::{DenoiseRequest, DenoiseResponse, Denoiser};
use crate::error::{Error, Result};

/// How to launch the external denoiser process.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExternalConfig {
    pub program: String,
    pub args: Vec<String>,
    pub timeout: Duration,
    /// Number of processes; each serves one request at a time.
    pub channels: usize,
}

impl ExternalConfig {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
            timeout: Self::DEFAULT_TIMEOUT,
            channels: 1,
        }
    }

    /// Parse a whitespace-separated command line.
    pub fn from_command_line(cmd: &str) -> Result<Self> {
        let mut parts = cmd.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| Error::Config("empty external denoiser command".into()))?;
        Ok(Self::new(program, parts.collect()))
    }
}

struct Channel {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    expect: Sender<usize>,
    frames: Receiver<Result<ResponseFrame>>,
    broken: bool,
}

impl Channel {
    fn spawn(cfg: &ExternalConfig) -> Result<Self> {
        let mut child = Command::new(&cfg.program)
            .args(&cfg.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let mut stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let (expect_tx, expect_rx) = mpsc::channel::<usize>();
        let (frame_tx, frame_rx) = mpsc::channel();
        // The reader thread owns stdout; a request names its channel count,
        // the thread reads exactly one frame for it.
        thread::spawn(move || {
            for channels in expect_rx {
                let frame = protocol::read_response_frame(&mut stdout, channels);
                let failed = frame.is_err();
                if frame_tx.send(frame).is_err() || failed {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            expect: expect_tx,
            frames: frame_rx,
            broken: false,
        })
    }

    fn roundtrip(&mut self, req: &DenoiseRequest, timeout: Duration) -> Result<DenoiseResponse> {
        if self.broken {
            return Err(Error::Protocol("channel unusable after an earlier failure".into()));
        }
        let result = self.exchange(req, timeout);
        if result.is_err() {
            self.broken = true;
        }
        result
    }

    fn exchange(&mut self, req: &DenoiseRequest, timeout: Duration) -> Result<DenoiseResponse> {
        let bytes = protocol::encode_request(&req.condition, &req.latent, req.gamma)?;
        let shape = req.latent.shape();
        self.expect
            .send(shape.channels)
            .map_err(|_| Error::Protocol("denoiser output reader stopped".into()))?;
        self.stdin.write_all(&bytes)?;
        self.stdin.flush()?;
        let frame = match self.frames.recv_timeout(timeout) {
            Ok(frame) => frame?,
            Err(RecvTimeoutError::Timeout) => return Err(Error::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Protocol("denoiser output reader stopped".into()))
            }
        };
        DenoiseResponse {
            epsilon: frame.into_epsilon(shape)?,
        }
        .validate(req)
    }
}

impl Drop for Channel {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Denoiser backed by one or more subprocesses speaking the framed protocol
/// over stdin/stdout.
pub struct ExternalDenoiser {
    config: ExternalConfig,
    channels: Vec<Mutex<Channel>>,
}

impl ExternalDenoiser {
    pub fn spawn(config: ExternalConfig) -> Result<Self> {
        let n = config.channels.max(1);
        let channels = (0..n)
            .map(|_| Channel::spawn(&config).map(Mutex::new))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, channels })
    }

    pub fn config(&self) -> &ExternalConfig {
        &self.config
    }
}

impl Denoiser for ExternalDenoiser {
    fn denoise(&self, req: &DenoiseRequest) -> Result<DenoiseResponse> {
        // Take the first idle channel, otherwise wait on one picked by origin.
        for ch in &self.channels {
            if let Ok(mut guard) = ch.try_lock() {
                return guard.roundtrip(req, self.config.timeout);
            }
        }
        let pick = (req.origin.0 * 31 + req.origin.1) % self.channels.len();
        let mut guard = self.channels[pick]
            .lock()
            .map_err(|_| Error::Protocol("denoiser channel poisoned".into()))?;
        guard.roundtrip(req, self.config.timeout)
    }
}
