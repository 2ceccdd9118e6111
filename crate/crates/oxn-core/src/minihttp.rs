//! Small synchronous HTTP/1.1 client and server.
//!
//! One implementation serves every HTTP need of the engine: the load
//! generator and telemetry collectors (TCP), the container daemon client
//! (Unix socket) and the simulated SUE's query endpoints (server side).
//! Plain HTTP only; one request per connection.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::os::unix::net::UnixStream;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("bad url {url:?}: {reason}")]
    BadUrl { url: String, reason: &'static str },
    #[error("connect failed: {0}")]
    Connect(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed response: {0}")]
    Malformed(String),
}

/// Where to open the connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp { host: String, port: u16 },
    Unix { path: String },
}

/// Split an absolute `http://host[:port]` prefix into an endpoint plus the
/// path part. TLS is out of scope: `https` URLs are rejected.
pub fn parse_url(url: &str) -> Result<(Endpoint, String), HttpError> {
    let bad = |reason| HttpError::BadUrl {
        url: url.to_string(),
        reason,
    };
    let rest = url
        .strip_prefix("http://")
        .ok_or_else(|| bad("only plain http:// targets are supported"))?;
    let (authority, path) = match rest.find('/') {
        Some(i) => (&rest[..i], rest[i..].to_string()),
        None => (rest, "/".to_string()),
    };
    if authority.is_empty() {
        return Err(bad("missing host"));
    }
    let (host, port) = match authority.rsplit_once(':') {
        Some((h, p)) => (
            h.to_string(),
            p.parse::<u16>().map_err(|_| bad("bad port"))?,
        ),
        None => (authority.to_string(), 80),
    };
    Ok((Endpoint::Tcp { host, port }, path))
}

#[derive(Debug, Clone)]
pub struct Response {
    pub status: u16,
    pub headers: BTreeMap<String, String>,
    pub body: Vec<u8>,
}

impl Response {
    pub fn body_str(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }
}

/// Issue one request. `path` must start with '/'; headers get Host,
/// Content-Length and Connection: close filled in.
pub fn request(
    endpoint: &Endpoint,
    method: &str,
    path: &str,
    extra_headers: &[(&str, &str)],
    body: Option<&[u8]>,
    timeout: Duration,
) -> Result<Response, HttpError> {
    match endpoint {
        Endpoint::Tcp { host, port } => {
            let addr = format!("{host}:{port}");
            let sock_addr: SocketAddr = std::net::ToSocketAddrs::to_socket_addrs(&addr)
                .map_err(|e| HttpError::Connect(format!("{addr}: {e}")))?
                .next()
                .ok_or_else(|| HttpError::Connect(format!("{addr}: no address")))?;
            let stream = TcpStream::connect_timeout(&sock_addr, timeout)
                .map_err(|e| HttpError::Connect(format!("{addr}: {e}")))?;
            stream.set_read_timeout(Some(timeout))?;
            stream.set_write_timeout(Some(timeout))?;
            exchange(stream, host, method, path, extra_headers, body)
        }
        Endpoint::Unix { path: sock } => {
            let stream = UnixStream::connect(sock)
                .map_err(|e| HttpError::Connect(format!("{sock}: {e}")))?;
            stream.set_read_timeout(Some(timeout))?;
            stream.set_write_timeout(Some(timeout))?;
            exchange(stream, "localhost", method, path, extra_headers, body)
        }
    }
}

fn exchange<S: Read + Write>(
    mut stream: S,
    host: &str,
    method: &str,
    path: &str,
    extra_headers: &[(&str, &str)],
    body: Option<&[u8]>,
) -> Result<Response, HttpError> {
    let mut head = format!("{method} {path} HTTP/1.1\r\nHost: {host}\r\nConnection: close\r\n");
    for (k, v) in extra_headers {
        head.push_str(&format!("{k}: {v}\r\n"));
    }
    let body = body.unwrap_or(&[]);
    if !body.is_empty() || matches!(method, "POST" | "PUT") {
        head.push_str(&format!("Content-Length: {}\r\n", body.len()));
    }
    head.push_str("\r\n");
    stream.write_all(head.as_bytes())?;
    stream.write_all(body)?;
    stream.flush()?;
    read_response(BufReader::new(stream))
}

fn read_response<R: BufRead>(mut reader: R) -> Result<Response, HttpError> {
    let mut status_line = String::new();
    reader.read_line(&mut status_line)?;
    let status = status_line
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse::<u16>().ok())
        .ok_or_else(|| HttpError::Malformed(format!("status line {status_line:?}")))?;

    let mut headers = BTreeMap::new();
    loop {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            headers.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
    }

    let body = if headers
        .get("transfer-encoding")
        .is_some_and(|v| v.eq_ignore_ascii_case("chunked"))
    {
        read_chunked(&mut reader)?
    } else if let Some(len) = headers.get("content-length") {
        let len: usize = len
            .parse()
            .map_err(|_| HttpError::Malformed("bad content-length".into()))?;
        let mut buf = vec![0u8; len];
        reader.read_exact(&mut buf)?;
        buf
    } else {
        let mut buf = Vec::new();
        reader.read_to_end(&mut buf)?;
        buf
    };
    Ok(Response {
        status,
        headers,
        body,
    })
}

fn read_chunked<R: BufRead>(reader: &mut R) -> Result<Vec<u8>, HttpError> {
    let mut out = Vec::new();
    loop {
        let mut size_line = String::new();
        reader.read_line(&mut size_line)?;
        let size =
            usize::from_str_radix(size_line.trim().split(';').next().unwrap_or("").trim(), 16)
                .map_err(|_| HttpError::Malformed(format!("bad chunk size {size_line:?}")))?;
        if size == 0 {
            let mut trailer = String::new();
            // consume optional trailers up to the final blank line
            while reader.read_line(&mut trailer)? > 0 && trailer.trim() != "" {
                trailer.clear();
            }
            break;
        }
        let mut chunk = vec![0u8; size];
        reader.read_exact(&mut chunk)?;
        out.extend_from_slice(&chunk);
        let mut crlf = [0u8; 2];
        reader.read_exact(&mut crlf)?;
    }
    Ok(out)
}

/// Percent-encode a query component.
pub fn url_encode(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for byte in s.bytes() {
        match byte {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => {
                out.push(byte as char)
            }
            _ => out.push_str(&format!("%{byte:02X}")),
        }
    }
    out
}

pub fn url_decode(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'%' if i + 3 <= bytes.len() => match u8::from_str_radix(&s[i + 1..i + 3], 16) {
                Ok(v) => {
                    out.push(v);
                    i += 3;
                }
                Err(_) => {
                    out.push(b'%');
                    i += 1;
                }
            },
            b'+' => {
                out.push(b' ');
                i += 1;
            }
            b => {
                out.push(b);
                i += 1;
            }
        }
    }
    String::from_utf8_lossy(&out).into_owned()
}

/// A parsed inbound request.
#[derive(Debug, Clone)]
pub struct ServerRequest {
    pub method: String,
    /// Path without the query string.
    pub path: String,
    pub query: BTreeMap<String, String>,
    pub body: Vec<u8>,
}

pub type Handler = dyn Fn(&ServerRequest) -> (u16, String) + Send + Sync;

/// Tiny threaded HTTP server for the simulated SUE's query surface.
/// Responses are JSON strings; one request per connection.
pub struct MiniServer {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<std::thread::JoinHandle<()>>,
}

impl MiniServer {
    pub fn bind(addr: &str, handler: Arc<Handler>) -> std::io::Result<MiniServer> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let shutdown = Arc::new(AtomicBool::new(false));
        let flag = shutdown.clone();
        let accept_thread = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let handler = handler.clone();
                std::thread::spawn(move || {
                    let _ = serve_one(stream, &handler);
                });
            }
        });
        Ok(MiniServer {
            addr: local,
            shutdown,
            accept_thread: Some(accept_thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for MiniServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // unblock the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

fn serve_one(stream: TcpStream, handler: &Arc<Handler>) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or("").to_string();
    let target = parts.next().unwrap_or("/").to_string();

    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.trim().eq_ignore_ascii_case("content-length") {
                content_length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    if content_length > 0 {
        reader.read_exact(&mut body)?;
    }

    let (path, query) = match target.split_once('?') {
        Some((p, q)) => (p.to_string(), parse_query(q)),
        None => (target, BTreeMap::new()),
    };
    let request = ServerRequest {
        method,
        path,
        query,
        body,
    };
    let (status, json) = handler(&request);
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        _ => "Status",
    };
    let mut stream = reader.into_inner();
    let head = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        json.len()
    );
    stream.write_all(head.as_bytes())?;
    stream.write_all(json.as_bytes())?;
    stream.flush()
}

pub fn parse_query(q: &str) -> BTreeMap<String, String> {
    q.split('&')
        .filter(|kv| !kv.is_empty())
        .map(|kv| match kv.split_once('=') {
            Some((k, v)) => (url_decode(k), url_decode(v)),
            None => (url_decode(kv), String::new()),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn url_parsing() {
        let (ep, path) = parse_url("http://localhost:8080/api?x=1").unwrap();
        assert_eq!(
            ep,
            Endpoint::Tcp {
                host: "localhost".into(),
                port: 8080
            }
        );
        assert_eq!(path, "/api?x=1");
        let (ep, path) = parse_url("http://gateway").unwrap();
        assert_eq!(
            ep,
            Endpoint::Tcp {
                host: "gateway".into(),
                port: 80
            }
        );
        assert_eq!(path, "/");
        assert!(parse_url("https://secure").is_err());
        assert!(parse_url("ftp://x").is_err());
    }

    #[test]
    fn encode_decode_round_trip() {
        let original = "increase(app_recommendations_counter_total[1m]) > 5 & x=y";
        assert_eq!(url_decode(&url_encode(original)), original);
    }

    #[test]
    fn client_talks_to_server() {
        let handler: Arc<Handler> = Arc::new(|req: &ServerRequest| {
            assert_eq!(req.method, "GET");
            assert_eq!(req.path, "/api/v1/query_range");
            assert_eq!(req.query.get("step").map(String::as_str), Some("1"));
            (200, r#"{"status":"success"}"#.to_string())
        });
        let server = MiniServer::bind("127.0.0.1:0", handler).unwrap();
        let (endpoint, _) = parse_url(&server.base_url()).unwrap();
        let resp = request(
            &endpoint,
            "GET",
            "/api/v1/query_range?query=up&step=1",
            &[],
            None,
            Duration::from_secs(5),
        )
        .unwrap();
        assert_eq!(resp.status, 200);
        assert_eq!(resp.body_str(), r#"{"status":"success"}"#);
    }

    #[test]
    fn chunked_bodies_are_reassembled() {
        let raw = b"HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\n4\r\nWiki\r\n5\r\npedia\r\n0\r\n\r\n";
        let resp = read_response(BufReader::new(&raw[..])).unwrap();
        assert_eq!(resp.body, b"Wikipedia");
    }
}
