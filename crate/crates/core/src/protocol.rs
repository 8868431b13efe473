//! Length-prefixed JSON protocol for driving a [`MillingEnv`] over a byte
//! stream. A frame is a big-endian u32 byte count followed by one UTF-8
//! JSON object.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};

use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, Environment, MillingEnv, RewardBreakdown, StepInfo, ACTION_DIM};
use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_ENDPOINT: &str = "127.0.0.1:7463";
pub const MAX_FRAME_BYTES: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Request {
    Spec,
    Reset { seed: u64 },
    Step { action: Vec<f64> },
    Close,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub version: u32,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub augmented: bool,
    pub control_dt_s: f64,
}

impl EnvSpec {
    pub fn of(cfg: &EnvConfig) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            obs_dim: cfg.obs_dim(),
            action_dim: ACTION_DIM,
            action_low: cfg.action_bounds.low().to_vec(),
            action_high: cfg.action_bounds.high().to_vec(),
            augmented: cfg.augmented_obs,
            control_dt_s: cfg.step.control_dt_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Response {
    Spec(EnvSpec),
    Reset { obs: Vec<f64> },
    Step { obs: Vec<f64>, reward: f64, breakdown: RewardBreakdown, done: bool, info: StepInfo },
    Closed,
    Error { message: String },
}

pub fn write_frame<W: Write, T: Serialize>(w: &mut W, msg: &T) -> Result<()> {
    let body = serde_json::to_vec(msg)?;
    if body.len() > MAX_FRAME_BYTES {
        return Err(Error::InvalidConfig(format!("frame of {} bytes exceeds limit", body.len())));
    }
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

/// `Ok(None)` on a clean end of stream before a frame starts.
pub fn read_frame<R: Read, T: for<'de> Deserialize<'de>>(r: &mut R) -> Result<Option<T>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME_BYTES {
        return Err(Error::InvalidConfig(format!("frame of {n} bytes exceeds limit")));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body)?;
    Ok(Some(serde_json::from_slice(&body)?))
}

/// One client session. After `close` the episode is dropped and further
/// steps are errors until the next reset.
pub struct Session {
    env: MillingEnv,
    active: bool,
}

impl Session {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        Ok(Self { env: MillingEnv::new(cfg)?, active: false })
    }

    pub fn env(&self) -> &MillingEnv {
        &self.env
    }

    pub fn handle(&mut self, req: Request) -> Response {
        match req {
            Request::Spec => Response::Spec(EnvSpec::of(self.env.config())),
            Request::Reset { seed } => match self.env.reset(seed) {
                Ok(obs) => {
                    self.active = true;
                    Response::Reset { obs }
                }
                Err(e) => Response::Error { message: e.to_string() },
            },
            Request::Step { action } => {
                if !self.active {
                    return Response::Error { message: Error::EpisodeFinished.to_string() };
                }
                match self.env.step(&action) {
                    Ok(r) => Response::Step { obs: r.obs, reward: r.reward.total, breakdown: r.reward, done: r.done, info: r.info },
                    Err(e) => Response::Error { message: e.to_string() },
                }
            }
            Request::Close => {
                self.active = false;
                self.env.release();
                Response::Closed
            }
        }
    }
}

/// Serve one connection until the peer hangs up. `close` only ends the
/// episode.
pub fn serve_stream<S: Read + Write>(stream: &mut S, cfg: EnvConfig) -> Result<()> {
    let mut session = Session::new(cfg)?;
    loop {
        let req: Request = match read_frame::<_, serde_json::Value>(stream)? {
            None => return Ok(()),
            Some(v) => match serde_json::from_value(v) {
                Ok(r) => r,
                Err(e) => {
                    write_frame(stream, &Response::Error { message: format!("bad request: {e}") })?;
                    continue;
                }
            },
        };
        write_frame(stream, &session.handle(req))?;
    }
}

/// Accept connections, one thread and one environment per connection.
/// Stops after `max_connections` when given.
pub fn serve<A: ToSocketAddrs>(addr: A, cfg: EnvConfig, max_connections: Option<usize>) -> Result<()> {
    let listener = TcpListener::bind(addr)?;
    serve_listener(listener, cfg, max_connections)
}

pub fn serve_listener(listener: TcpListener, cfg: EnvConfig, max_connections: Option<usize>) -> Result<()> {
    cfg.validate()?;
    log::info!("serving environment on {}", listener.local_addr()?);
    let mut handles = Vec::new();
    for (k, stream) in listener.incoming().enumerate() {
        let mut stream: TcpStream = stream?;
        stream.set_nodelay(true)?;
        let cfg = cfg.clone();
        handles.push(std::thread::spawn(move || {
            if let Err(e) = serve_stream(&mut stream, cfg) {
                log::warn!("connection ended with error: {e}");
            }
        }));
        if max_connections.is_some_and(|m| k + 1 >= m) {
            break;
        }
    }
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_roundtrip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &Request::Step { action: vec![800.0, 0.1, -3.25] }).unwrap();
        assert_eq!(&buf[..4], &((buf.len() - 4) as u32).to_be_bytes());
        let back: Request = read_frame(&mut buf.as_slice()).unwrap().unwrap();
        assert_eq!(back, Request::Step { action: vec![800.0, 0.1, -3.25] });
        let empty: Option<Request> = read_frame(&mut [].as_slice()).unwrap();
        assert!(empty.is_none());
    }

    #[test]
    fn request_json_shape() {
        let s = serde_json::to_string(&Request::Reset { seed: 4 }).unwrap();
        assert_eq!(s, r#"{"kind":"reset","seed":4}"#);
        assert!(serde_json::from_str::<Request>(r#"{"kind":"launch"}"#).is_err());
    }
}
