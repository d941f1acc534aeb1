//! HTTP front end for [`RetrievalService`].
//!
//! * `POST /retrieve` takes a [`RetrieveRequest`] and answers with the
//!   retrieval result as canonical JSON.
//! * `POST /index` takes a JSONL corpus and swaps the index.
//! * `GET /health` reports the index size.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use tiny_http::{Header, Method, Request, Response, Server};
use ur2_core::retrieval::{CorpusChunk, CorpusIndex};

use super::{RetrieveError, RetrieveRequest, RetrievalService};
use crate::canonical;

pub struct RetrievalServer {
    server: Arc<Server>,
    workers: Vec<JoinHandle<()>>,
    addr: SocketAddr,
}

impl RetrievalServer {
    /// Binds `addr` and handles requests on `threads` worker threads.
    pub fn start(
        service: Arc<RetrievalService>,
        addr: &str,
        threads: usize,
    ) -> Result<Self, Box<dyn std::error::Error + Send + Sync>> {
        let server = Arc::new(Server::http(addr)?);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or("server is not bound to an ip address")?;
        let workers = (0..threads.max(1))
            .map(|_| {
                let server = server.clone();
                let service = service.clone();
                std::thread::spawn(move || {
                    for req in server.incoming_requests() {
                        handle(&service, req);
                    }
                })
            })
            .collect();
        Ok(RetrievalServer {
            server,
            workers,
            addr,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(self) {
        self.server.unblock();
        for _ in 1..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers {
            let _ = w.join();
        }
    }

    /// Serves until the process is stopped.
    pub fn wait(self) {
        for w in self.workers {
            let _ = w.join();
        }
    }
}

fn json_header() -> Header {
    Header::from_bytes("content-type", "application/json").expect("static header")
}

fn error_body(msg: &str) -> String {
    canonical::value_to_string(&serde_json::json!({ "error": msg })).unwrap_or_default()
}

fn route(service: &RetrievalService, method: &Method, url: &str, body: &str) -> (u16, String) {
    match (method, url) {
        (Method::Post, "/retrieve") => {
            let req: RetrieveRequest = match serde_json::from_str(body) {
                Ok(r) => r,
                Err(e) => return (400, error_body(&e.to_string())),
            };
            match service.retrieve_and_summarize(&req) {
                Ok(result) => match canonical::to_string(&result) {
                    Ok(s) => (200, s),
                    Err(e) => (500, error_body(&e.to_string())),
                },
                Err(RetrieveError::Retrieval(e)) => (400, error_body(&e.to_string())),
                Err(e) => (503, error_body(&e.to_string())),
            }
        }
        (Method::Post, "/index") => {
            let mut chunks = Vec::new();
            for (i, line) in body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                match serde_json::from_str::<CorpusChunk>(line) {
                    Ok(c) => chunks.push(c),
                    Err(e) => return (400, error_body(&format!("line {}: {e}", i + 1))),
                }
            }
            match CorpusIndex::build(chunks) {
                Ok(index) => {
                    let size = index.len();
                    service.replace_index(index);
                    (200, format!("{{\"size\":{size}}}"))
                }
                Err(e) => (400, error_body(&e.to_string())),
            }
        }
        (Method::Get, "/health") => (
            200,
            format!("{{\"size\":{},\"status\":\"ok\"}}", service.index().len()),
        ),
        _ => (404, error_body("not found")),
    }
}

fn handle(service: &RetrievalService, mut req: Request) {
    let mut body = String::new();
    let (status, text) = if let Err(e) = req.as_reader().read_to_string(&mut body) {
        (400, error_body(&e.to_string()))
    } else {
        route(service, req.method(), req.url(), &body)
    };
    let mut resp = Response::from_string(text)
        .with_status_code(status)
        .with_header(json_header());
    if let Some(id) = req
        .headers()
        .iter()
        .find(|h| h.field.equiv("x-request-id"))
        .cloned()
    {
        resp = resp.with_header(id);
    }
    let _ = req.respond(resp);
}
