//! Newline-delimited JSON scorer protocol over TCP.
//!
//! Request:  `{"source":[x,y],"edited":[x,y],"code":n}`
//! Response: `{"alignment":a,"coherence":c,"consistency":s}`
//!
//! One request line is answered by exactly one response line. The server
//! knows which task it scores; the request carries only the instruction code.

use std::io::{self, BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{analytic_score, RewardError, RewardScore, Scorer};
use crate::flow::task::{EditInstance, Instruction, Task};

pub const DEFAULT_ATTEMPTS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub source: [f64; 2],
    pub edited: [f64; 2],
    pub code: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreResponse {
    pub alignment: f64,
    pub coherence: f64,
    pub consistency: f64,
}

impl From<RewardScore> for ScoreResponse {
    fn from(s: RewardScore) -> Self {
        Self {
            alignment: s.alignment,
            coherence: s.coherence,
            consistency: s.consistency,
        }
    }
}

/// Decodes and range-checks one response line.
pub fn decode_response(line: &str) -> Result<RewardScore, RewardError> {
    let resp: ScoreResponse = serde_json::from_str(line.trim_end())
        .map_err(|e| RewardError::Malformed(format!("{e}: {:?}", line.trim_end())))?;
    RewardScore::new(resp.alignment, resp.coherence, resp.consistency)
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

/// Client for a remote scorer. Each clone opens its own connection.
pub struct RemoteScorer {
    addr: SocketAddr,
    timeout: Duration,
    attempts: usize,
    conn: Option<Connection>,
}

impl Clone for RemoteScorer {
    fn clone(&self) -> Self {
        Self {
            addr: self.addr,
            timeout: self.timeout,
            attempts: self.attempts,
            conn: None,
        }
    }
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut)
}

impl RemoteScorer {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self, RewardError> {
        let addr = endpoint
            .to_socket_addrs()
            .map_err(RewardError::Connect)?
            .next()
            .ok_or_else(|| {
                RewardError::Connect(io::Error::new(
                    ErrorKind::InvalidInput,
                    format!("no address for {endpoint}"),
                ))
            })?;
        Ok(Self {
            addr,
            timeout,
            attempts: DEFAULT_ATTEMPTS,
            conn: None,
        })
    }

    pub fn with_attempts(mut self, attempts: usize) -> Self {
        self.attempts = attempts.max(1);
        self
    }

    fn connect(&self) -> io::Result<Connection> {
        let stream = TcpStream::connect_timeout(&self.addr, self.timeout)?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        stream.set_nodelay(true)?;
        Ok(Connection {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        })
    }

    fn exchange(&mut self, payload: &str) -> io::Result<String> {
        if self.conn.is_none() {
            self.conn = Some(self.connect()?);
        }
        let conn = self.conn.as_mut().expect("connected");
        conn.writer.write_all(payload.as_bytes())?;
        conn.writer.flush()?;
        let mut line = String::new();
        if conn.reader.read_line(&mut line)? == 0 {
            return Err(io::Error::new(ErrorKind::UnexpectedEof, "scorer closed the connection"));
        }
        Ok(line)
    }

    pub fn request(&mut self, req: &ScoreRequest) -> Result<RewardScore, RewardError> {
        let mut payload = serde_json::to_string(req).map_err(|e| RewardError::Malformed(e.to_string()))?;
        payload.push('\n');
        let mut last = None;
        for _ in 0..self.attempts {
            match self.exchange(&payload) {
                Ok(line) => return decode_response(&line),
                Err(e) => {
                    self.conn = None;
                    last = Some(e);
                }
            }
        }
        match last {
            Some(e) if !is_timeout(&e) && e.kind() != ErrorKind::UnexpectedEof => {
                Err(RewardError::Connect(e))
            }
            _ => Err(RewardError::Timeout {
                attempts: self.attempts,
            }),
        }
    }
}

impl Scorer for RemoteScorer {
    fn score(&mut self, x0: [f64; 2], inst: &EditInstance) -> Result<RewardScore, RewardError> {
        self.request(&ScoreRequest {
            source: inst.source,
            edited: x0,
            code: inst.instruction.code,
        })
    }
}

/// Answers one request line; errors become an `{"error": ...}` object.
pub fn answer(task: Task, line: &str) -> String {
    let result = serde_json::from_str::<ScoreRequest>(line.trim_end())
        .map_err(|e| e.to_string())
        .and_then(|req| {
            let ins = Instruction::new(task, req.code).map_err(|e| e.to_string())?;
            let inst = EditInstance::new(req.source, ins);
            Ok(ScoreResponse::from(analytic_score(req.edited, &inst)))
        });
    match result {
        Ok(resp) => serde_json::to_string(&resp).expect("response serializes"),
        Err(msg) => serde_json::json!({ "error": msg }).to_string(),
    }
}

fn handle(task: Task, stream: TcpStream) -> io::Result<()> {
    let mut writer = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let mut out = answer(task, &line?);
        out.push('\n');
        writer.write_all(out.as_bytes())?;
    }
    Ok(())
}

/// Serves scoring requests forever, one thread per connection.
pub fn serve(listener: TcpListener, task: Task) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        thread::spawn(move || handle(task, stream));
    }
    Ok(())
}

/// Binds `addr` and serves on a background thread, returning the bound address.
pub fn spawn_mock(addr: &str, task: Task) -> io::Result<SocketAddr> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    thread::spawn(move || serve(listener, task));
    Ok(local)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_rejects_bad_lines() {
        assert!(matches!(decode_response("not json"), Err(RewardError::Malformed(_))));
        assert!(matches!(
            decode_response(r#"{"alignment":1,"coherence":2}"#),
            Err(RewardError::Malformed(_))
        ));
        assert!(matches!(
            decode_response(r#"{"alignment":7,"coherence":2,"consistency":3}"#),
            Err(RewardError::OutOfRange { field: "alignment", .. })
        ));
        let ok = decode_response(r#"{"alignment":1.5,"coherence":2,"consistency":3}"#).unwrap();
        assert_eq!(ok.total(), 6.5);
    }

    #[test]
    fn answer_reports_bad_codes() {
        let out = answer(Task::MoveToMode, r#"{"source":[0,0],"edited":[1,1],"code":9}"#);
        assert!(out.contains("error"));
    }
}
