//! Wire-protocol client for an external estimator, plus a loopback echo
//! test double.
//!
//! The protocol is a single HTTP POST to `/v1/estimate` with a JSON body
//! carrying the context and queries; the response carries the fields. A
//! remote estimator never returns query-jacobians, so it can only be used
//! with the detached-gradient training policy. Any irregularity aborts with
//! a [`Error::Protocol`]; the caller must never substitute local estimates
//! silently.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{EstimatorContext, FieldEstimate, DIFFUSION_FLOOR};

/// Path the estimation service answers on.
pub const ESTIMATE_PATH: &str = "/v1/estimate";

/// Default request timeout when the config does not override it.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

/// JSON request body: context transitions plus query points. Each pair is
/// `[x, x_next]` with both entries length-`dim` arrays of doubles.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimateRequest {
    pub dt: f64,
    pub dim: usize,
    pub pairs: Vec<[Vec<f64>; 2]>,
    pub queries: Vec<Vec<f64>>,
}

/// JSON response body. `flags` lists indices of out-of-support queries.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimateResponse {
    pub drift: Vec<Vec<f64>>,
    pub diff_sq: Vec<Vec<f64>>,
    #[serde(default)]
    pub flags: Vec<usize>,
}

impl EstimateRequest {
    pub fn new(ctx: &EstimatorContext, queries: ArrayView2<'_, f64>) -> Self {
        let pairs = ctx
            .pairs_x()
            .rows()
            .into_iter()
            .zip(ctx.delta_x().rows())
            .map(|(x, dx)| {
                let x_next = x.iter().zip(dx.iter()).map(|(a, b)| a + b).collect();
                [x.to_vec(), x_next]
            })
            .collect();
        EstimateRequest {
            dt: ctx.dt(),
            dim: ctx.dim(),
            pairs,
            queries: queries.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }
}

/// Queries an external estimator over HTTP. The result never carries
/// jacobians; squared diffusion is clamped to [`DIFFUSION_FLOOR`].
pub fn estimate_remote(
    endpoint: &str,
    ctx: &EstimatorContext,
    queries: ArrayView2<'_, f64>,
    timeout: Duration,
) -> Result<FieldEstimate> {
    let dim = ctx.dim();
    if queries.ncols() != dim {
        return Err(Error::Config(format!(
            "queries have dimension {}, context has {dim}",
            queries.ncols()
        )));
    }
    let request = EstimateRequest::new(ctx, queries);
    let url = format!("{}{ESTIMATE_PATH}", endpoint.trim_end_matches('/'));
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .new_agent();
    let mut response = agent.post(&url).send_json(&request).map_err(|e| match e {
        ureq::Error::StatusCode(code) => {
            Error::Protocol(format!("endpoint {url} answered HTTP status {code}"))
        }
        other => Error::Protocol(format!("transport failure contacting {url}: {other}")),
    })?;
    let body: EstimateResponse = response
        .body_mut()
        .read_json()
        .map_err(|e| Error::Protocol(format!("malformed response from {url}: {e}")))?;
    parse_response(body, queries.nrows(), dim)
}

fn parse_response(body: EstimateResponse, n_queries: usize, dim: usize) -> Result<FieldEstimate> {
    if body.drift.len() != n_queries || body.diff_sq.len() != n_queries {
        return Err(Error::Protocol(format!(
            "dimension mismatch: {} drift rows and {} diff_sq rows for {n_queries} queries",
            body.drift.len(),
            body.diff_sq.len()
        )));
    }
    let mut drift = Array2::zeros((n_queries, dim));
    let mut diff_sq = Array2::zeros((n_queries, dim));
    for (qi, (f_row, g_row)) in body.drift.iter().zip(&body.diff_sq).enumerate() {
        if f_row.len() != dim || g_row.len() != dim {
            return Err(Error::Protocol(format!(
                "dimension mismatch: response row {qi} has lengths {}/{}, expected {dim}",
                f_row.len(),
                g_row.len()
            )));
        }
        for k in 0..dim {
            if !f_row[k].is_finite() || !g_row[k].is_finite() {
                return Err(Error::Protocol(format!(
                    "malformed response: non-finite field value at query {qi}"
                )));
            }
            drift[[qi, k]] = f_row[k];
            diff_sq[[qi, k]] = g_row[k].max(DIFFUSION_FLOOR);
        }
    }
    let mut flags = body.flags;
    if let Some(&bad) = flags.iter().find(|&&f| f >= n_queries) {
        return Err(Error::Protocol(format!(
            "dimension mismatch: flag index {bad} out of range for {n_queries} queries"
        )));
    }
    flags.sort_unstable();
    flags.dedup();
    Ok(FieldEstimate { drift, diff_sq, drift_jac: None, diff_sq_jac: None, flags })
}

/// Handshake: sends a small fixed context and verifies the endpoint answers
/// with a structurally valid response.
pub fn protocol_check(endpoint: &str, timeout: Duration) -> Result<FieldEstimate> {
    let xs = Array2::from_shape_vec((4, 1), vec![-1.0, -0.5, 0.5, 1.0]).unwrap();
    let x_next = Array2::from_shape_vec((4, 1), vec![-0.9, -0.45, 0.44, 0.92]).unwrap();
    let ctx = EstimatorContext::from_pairs(xs, x_next.view(), 0.01)?;
    let queries = Array2::from_shape_vec((2, 1), vec![0.0, 0.5]).unwrap();
    estimate_remote(endpoint, &ctx, queries.view(), timeout)
}

/// Loopback test double speaking the estimation protocol: echoes each query
/// back as its drift, answers unit squared diffusion, and never flags.
pub struct EchoServer {
    addr: SocketAddr,
    running: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl EchoServer {
    pub fn spawn() -> Result<Self> {
        let listener = TcpListener::bind(("127.0.0.1", 0))
            .map_err(|e| Error::Protocol(format!("echo double failed to bind: {e}")))?;
        let addr = listener
            .local_addr()
            .map_err(|e| Error::Protocol(format!("echo double has no local address: {e}")))?;
        let running = Arc::new(AtomicBool::new(true));
        let flag = Arc::clone(&running);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if !flag.load(Ordering::SeqCst) {
                    break;
                }
                if let Ok(stream) = stream {
                    let _ = serve_echo(stream);
                }
            }
        });
        Ok(EchoServer { addr, running, handle: Some(handle) })
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for EchoServer {
    fn drop(&mut self) {
        self.running.store(false, Ordering::SeqCst);
        // A throwaway connection unblocks the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn serve_echo(stream: TcpStream) -> std::io::Result<()> {
    let peer = stream.try_clone()?;
    let mut reader = BufReader::new(peer);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                content_length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;

    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or("");
    let path = parts.next().unwrap_or("");
    let (status, payload) = if method != "POST" || path != ESTIMATE_PATH {
        ("404 Not Found", r#"{"error":"unknown path"}"#.to_string())
    } else {
        match serde_json::from_slice::<EstimateRequest>(&body) {
            Ok(request) => {
                let n = request.queries.len();
                let response = EstimateResponse {
                    drift: request.queries,
                    diff_sq: vec![vec![1.0; request.dim]; n],
                    flags: Vec::new(),
                };
                ("200 OK", serde_json::to_string(&response).expect("echo response serializes"))
            }
            Err(e) => ("400 Bad Request", format!(r#"{{"error":"{e}"}}"#)),
        }
    };
    write_http_response(stream, status, &payload)
}

fn write_http_response(mut stream: TcpStream, status: &str, payload: &str) -> std::io::Result<()> {
    let header = format!(
        "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n",
        payload.len()
    );
    stream.write_all(header.as_bytes())?;
    stream.write_all(payload.as_bytes())?;
    stream.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// One-shot double answering a single request with a fixed raw payload.
    fn one_shot_server(status: &'static str, payload: &'static str) -> SocketAddr {
        let listener = TcpListener::bind(("127.0.0.1", 0)).unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            if let Ok((stream, _)) = listener.accept() {
                let peer = stream.try_clone().unwrap();
                let mut reader = BufReader::new(peer);
                let mut content_length = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    if line.trim_end().is_empty() {
                        break;
                    }
                    if let Some((name, value)) = line.trim_end().split_once(':') {
                        if name.eq_ignore_ascii_case("content-length") {
                            content_length = value.trim().parse().unwrap_or(0);
                        }
                    }
                }
                let mut body = vec![0u8; content_length];
                let _ = reader.read_exact(&mut body);
                let _ = write_http_response(stream, status, payload);
            }
        });
        addr
    }

    fn small_context() -> EstimatorContext {
        let x = array![[-1.0], [0.0], [1.0]];
        let x_next = array![[-0.95], [0.02], [0.9]];
        EstimatorContext::from_pairs(x, x_next.view(), 0.01).unwrap()
    }

    #[test]
    fn echo_round_trip_returns_canned_fields() {
        let server = EchoServer::spawn().unwrap();
        let ctx = small_context();
        let queries = array![[0.125], [-0.7], [2.5]];
        let est =
            estimate_remote(&server.endpoint(), &ctx, queries.view(), DEFAULT_TIMEOUT).unwrap();
        // Echo semantics: drift equals the queries bit-exactly, diffusion 1.
        assert_eq!(est.drift, queries);
        assert!(est.diff_sq.iter().all(|&g| g == 1.0));
        assert!(est.flags.is_empty());
        assert!(est.drift_jac.is_none() && est.diff_sq_jac.is_none());
    }

    #[test]
    fn echo_serves_repeated_requests() {
        let server = EchoServer::spawn().unwrap();
        for _ in 0..3 {
            let est = protocol_check(&server.endpoint(), DEFAULT_TIMEOUT).unwrap();
            assert_eq!(est.drift.nrows(), 2);
        }
    }

    #[test]
    fn drift_row_count_mismatch_is_a_dimension_error() {
        let addr =
            one_shot_server("200 OK", r#"{"drift":[[0.1]],"diff_sq":[[1.0]],"flags":[]}"#);
        let ctx = small_context();
        let queries = array![[0.0], [0.5]];
        let err = estimate_remote(&format!("http://{addr}"), &ctx, queries.view(), DEFAULT_TIMEOUT)
            .unwrap_err();
        assert!(matches!(&err, Error::Protocol(msg) if msg.contains("dimension mismatch")), "{err}");
    }

    #[test]
    fn malformed_json_is_a_malformed_response_error() {
        let addr = one_shot_server("200 OK", "this is not json");
        let ctx = small_context();
        let queries = array![[0.0]];
        let err = estimate_remote(&format!("http://{addr}"), &ctx, queries.view(), DEFAULT_TIMEOUT)
            .unwrap_err();
        assert!(matches!(&err, Error::Protocol(msg) if msg.contains("malformed response")), "{err}");
    }

    #[test]
    fn http_error_status_is_reported() {
        let addr = one_shot_server("500 Internal Server Error", r#"{"error":"boom"}"#);
        let ctx = small_context();
        let queries = array![[0.0]];
        let err = estimate_remote(&format!("http://{addr}"), &ctx, queries.view(), DEFAULT_TIMEOUT)
            .unwrap_err();
        assert!(matches!(&err, Error::Protocol(msg) if msg.contains("500")), "{err}");
    }

    #[test]
    fn unreachable_endpoint_is_a_transport_error_within_timeout() {
        // A bound-then-dropped listener yields a port that refuses connections.
        let port = {
            let listener = TcpListener::bind(("127.0.0.1", 0)).unwrap();
            listener.local_addr().unwrap().port()
        };
        let ctx = small_context();
        let queries = array![[0.0]];
        let start = std::time::Instant::now();
        let err = estimate_remote(
            &format!("http://127.0.0.1:{port}"),
            &ctx,
            queries.view(),
            Duration::from_secs(2),
        )
        .unwrap_err();
        assert!(matches!(&err, Error::Protocol(msg) if msg.contains("transport")), "{err}");
        assert!(start.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn remote_diffusion_is_clamped_to_the_floor() {
        let addr = one_shot_server(
            "200 OK",
            r#"{"drift":[[0.0]],"diff_sq":[[0.0]],"flags":[]}"#,
        );
        let ctx = small_context();
        let queries = array![[0.0]];
        let est = estimate_remote(&format!("http://{addr}"), &ctx, queries.view(), DEFAULT_TIMEOUT)
            .unwrap();
        assert_eq!(est.diff_sq[[0, 0]], DIFFUSION_FLOOR);
    }

    #[test]
    fn flag_index_out_of_range_is_rejected() {
        let addr = one_shot_server(
            "200 OK",
            r#"{"drift":[[0.0]],"diff_sq":[[1.0]],"flags":[3]}"#,
        );
        let ctx = small_context();
        let queries = array![[0.0]];
        let err = estimate_remote(&format!("http://{addr}"), &ctx, queries.view(), DEFAULT_TIMEOUT)
            .unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn request_serialization_carries_pairs_and_queries() {
        let ctx = small_context();
        let queries = array![[0.25]];
        let req = EstimateRequest::new(&ctx, queries.view());
        let json = serde_json::to_string(&req).unwrap();
        let back: EstimateRequest = serde_json::from_str(&json).unwrap();
        assert_eq!(back.dim, 1);
        assert_eq!(back.dt, 0.01);
        assert_eq!(back.pairs.len(), 3);
        assert_eq!(back.pairs[0][0], vec![-1.0]);
        assert_eq!(back.pairs[0][1], vec![-0.95]);
        assert_eq!(back.queries, vec![vec![0.25]]);
    }
}
