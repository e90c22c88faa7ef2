//! Shared test support: a minimal in-process HTTP stub server and a
//! recording sleeper for backoff-schedule assertions.

// Each test target uses a different subset of this module.
#![allow(dead_code)]

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

#[derive(Clone, Debug)]
pub struct StubResponse {
    pub status: u16,
    pub body: String,
    /// Hold the response this long (for in-flight concurrency tests).
    pub delay: Option<Duration>,
}

impl StubResponse {
    pub fn ok(body: &str) -> Self {
        Self {
            status: 200,
            body: body.to_string(),
            delay: None,
        }
    }

    pub fn status(status: u16) -> Self {
        Self {
            status,
            body: format!(r#"{{"error":"injected {status}"}}"#),
            delay: None,
        }
    }
}

/// Scripted single-threaded HTTP/1.1 stub: pops one scripted response per
/// request and records every raw request body. When the script runs dry the
/// last response repeats.
pub struct StubServer {
    base_url: String,
    requests: Arc<Mutex<Vec<String>>>,
    in_flight: Arc<AtomicUsize>,
    high_water: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(script: Vec<StubResponse>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
        let addr = listener.local_addr().unwrap();
        listener.set_nonblocking(true).unwrap();
        let requests: Arc<Mutex<Vec<String>>> = Arc::default();
        let in_flight: Arc<AtomicUsize> = Arc::default();
        let high_water: Arc<AtomicUsize> = Arc::default();
        let stop: Arc<AtomicBool> = Arc::default();

        let handle = {
            let requests = requests.clone();
            let in_flight = in_flight.clone();
            let high_water = high_water.clone();
            let stop = stop.clone();
            std::thread::spawn(move || {
                let script = Arc::new(Mutex::new(VecDeque::from(script)));
                let mut workers = Vec::new();
                while !stop.load(Ordering::SeqCst) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let requests = requests.clone();
                            let in_flight = in_flight.clone();
                            let high_water = high_water.clone();
                            let script = script.clone();
                            workers.push(std::thread::spawn(move || {
                                let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                                high_water.fetch_max(now, Ordering::SeqCst);
                                serve_one(stream, &requests, &script);
                                in_flight.fetch_sub(1, Ordering::SeqCst);
                            }));
                        }
                        Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                            std::thread::sleep(Duration::from_millis(2));
                        }
                        Err(_) => break,
                    }
                }
                for w in workers {
                    let _ = w.join();
                }
            })
        };

        Self {
            base_url: format!("http://{addr}"),
            requests,
            in_flight,
            high_water,
            stop,
            handle: Some(handle),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn request_bodies(&self) -> Vec<String> {
        self.requests.lock().unwrap().clone()
    }

    pub fn max_concurrent(&self) -> usize {
        self.high_water.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
        let _ = self.in_flight.load(Ordering::SeqCst);
    }
}

fn serve_one(
    mut stream: std::net::TcpStream,
    requests: &Mutex<Vec<String>>,
    script: &Mutex<VecDeque<StubResponse>>,
) {
    stream
        .set_read_timeout(Some(Duration::from_secs(5)))
        .unwrap();
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let body_start = loop {
        match stream.read(&mut chunk) {
            Ok(0) => return,
            Ok(n) => {
                buf.extend_from_slice(&chunk[..n]);
                if let Some(pos) = find_header_end(&buf) {
                    break pos;
                }
            }
            Err(_) => return,
        }
    };
    let header = String::from_utf8_lossy(&buf[..body_start]).into_owned();
    let content_length = header
        .lines()
        .find_map(|l| {
            let (name, value) = l.split_once(':')?;
            name.eq_ignore_ascii_case("content-length")
                .then(|| value.trim().parse::<usize>().ok())?
        })
        .unwrap_or(0);
    while buf.len() < body_start + content_length {
        match stream.read(&mut chunk) {
            Ok(0) => break,
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
            Err(_) => return,
        }
    }
    let body = String::from_utf8_lossy(&buf[body_start..]).into_owned();
    requests.lock().unwrap().push(body);

    let response = {
        let mut script = script.lock().unwrap();
        if script.len() > 1 {
            script.pop_front().unwrap()
        } else {
            script.front().cloned().unwrap_or(StubResponse::status(500))
        }
    };
    if let Some(delay) = response.delay {
        std::thread::sleep(delay);
    }
    let reason = match response.status {
        200 => "OK",
        429 => "Too Many Requests",
        400 => "Bad Request",
        _ => "Error",
    };
    let payload = format!(
        "HTTP/1.1 {} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        response.status,
        reason,
        response.body.len(),
        response.body
    );
    let _ = stream.write_all(payload.as_bytes());
    let _ = stream.flush();
}

fn find_header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n").map(|p| p + 4)
}

pub type Sleeper = Box<dyn Fn(Duration) + Send + Sync>;

/// Sleeper that records requested delays instead of sleeping.
pub fn recording_sleeper() -> (Sleeper, Arc<Mutex<Vec<Duration>>>) {
    let log: Arc<Mutex<Vec<Duration>>> = Arc::default();
    let log2 = log.clone();
    (
        Box::new(move |d| {
            log2.lock().unwrap().push(d);
        }),
        log,
    )
}
