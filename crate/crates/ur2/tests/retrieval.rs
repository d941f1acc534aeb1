mod common;

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use ur2::gateway::ScriptedBackend;
use ur2::retrieval::client::HttpRetriever;
use ur2::retrieval::online::{
    ManualClock, OnlineError, OnlineFetcher, PageCache, PageFetcher, RateLimiter, SearchApi,
    CACHE_CAPACITY,
};
use ur2::retrieval::server::RetrievalServer;
use ur2::retrieval::{index_corpus_file, RetrievalService, RetrieveRequest, Retriever, Summarizer};
use ur2_core::prompts::{SummaryDomain, SummaryPhase, FALLBACK_SUMMARY};

fn request(query: &str, k: usize) -> RetrieveRequest {
    RetrieveRequest {
        query: query.into(),
        prev_reasoning: String::new(),
        k,
        mode: SummaryPhase::Train,
        domain: SummaryDomain::General,
    }
}

fn service() -> RetrievalService {
    index_corpus_file(&common::fixtures().join("e2e/corpus.jsonl"))
        .map(RetrievalService::new)
        .unwrap()
}

#[test]
fn raw_payload_without_summarizer() {
    let r = service().retrieve(&request("Eiffel Tower opened", 10)).unwrap();
    assert_eq!(r.ranked.len(), 10);
    assert!(r.ranked[0].chunk.doc_id == "eiffel");
    assert_eq!(r.payload.lines().count(), 3);
    assert!(r.summary.is_none() && !r.is_fallback);
}

#[test]
fn summarizer_output_and_fallback() {
    let svc = service().with_summarizer(Summarizer::new(Arc::new(ScriptedBackend::constant(
        "Reasoning.\n**Final Information**\nIt opened in 1889.",
    ))));
    let r = svc.retrieve(&request("Eiffel Tower", 5)).unwrap();
    assert_eq!(r.summary.as_deref(), Some("It opened in 1889."));
    assert_eq!(r.payload, "It opened in 1889.");

    let svc = service().with_summarizer(Summarizer::new(Arc::new(ScriptedBackend::constant(
        &format!("**Final Information**\n{FALLBACK_SUMMARY}"),
    ))));
    assert!(svc.retrieve(&request("design a bridge", 5)).unwrap().is_fallback);

    // A failing summarizer degrades to all k raw chunks.
    let svc = service().with_summarizer(Summarizer::new(Arc::new(ScriptedBackend::default())));
    let r = svc.retrieve(&request("Seine", 5)).unwrap();
    assert_eq!(r.payload.lines().count(), 5);
    assert!(r.summary.is_none());
}

#[test]
fn http_server_and_client_agree_with_in_process() {
    let svc = Arc::new(service());
    let server = RetrievalServer::start(svc.clone(), "127.0.0.1:0", 2).unwrap();
    let client = HttpRetriever::new(&server.url());
    for q in ["Eiffel Tower", "river Paris", "atomic number 8"] {
        let local = svc.retrieve(&request(q, 4)).unwrap();
        let remote = client.retrieve(&request(q, 4)).unwrap();
        assert_eq!(local.payload, remote.payload);
        assert_eq!(local.ranked.len(), remote.ranked.len());
        for (a, b) in local.ranked.iter().zip(&remote.ranked) {
            assert_eq!(a.chunk, b.chunk);
            assert!((a.score - b.score).abs() < 1e-12);
        }
    }
    assert!(client.retrieve(&request(" ", 4)).is_err());

    let health = ureq::get(&format!("{}/health", server.url())).call().unwrap().into_string().unwrap();
    assert_eq!(health, "{\"size\":10,\"status\":\"ok\"}");
    let body = "{\"doc_id\":\"x\",\"chunk_id\":\"x#0\",\"title\":\"X\",\"text\":\"only chunk\"}\n";
    let resp = ureq::post(&format!("{}/index", server.url())).send_string(body).unwrap();
    assert_eq!(resp.into_string().unwrap(), "{\"size\":1}");
    assert_eq!(svc.index().len(), 1);
    assert!(ureq::get(&format!("{}/missing", server.url())).call().is_err());
    server.shutdown();
}

struct StubSearch {
    urls: Vec<String>,
    calls: AtomicUsize,
}

impl SearchApi for StubSearch {
    fn search(&self, _: &str, count: usize, offset: usize) -> Result<Vec<String>, OnlineError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.urls.iter().skip(offset).take(count).cloned().collect())
    }
}

struct DownSearch;

impl SearchApi for DownSearch {
    fn search(&self, _: &str, _: usize, _: usize) -> Result<Vec<String>, OnlineError> {
        Err(OnlineError::SearchApiUnavailable("503".into()))
    }
}

struct StubPages {
    broken: HashSet<String>,
    fetched: Mutex<Vec<String>>,
}

impl PageFetcher for StubPages {
    fn fetch(&self, url: &str) -> Result<String, OnlineError> {
        self.fetched.lock().unwrap().push(url.to_string());
        if self.broken.contains(url) {
            return Err(OnlineError::Fetch {
                url: url.into(),
                detail: "timeout".into(),
            });
        }
        Ok(format!("<html><body><p>Page {url}</p><script>x()</script></body></html>"))
    }
}

fn online(urls: usize, broken: &[&str]) -> (OnlineFetcher, Arc<StubPages>, Arc<StubSearch>) {
    let search = Arc::new(StubSearch {
        urls: (0..urls).map(|i| format!("u{i}")).collect(),
        calls: AtomicUsize::new(0),
    });
    let pages = Arc::new(StubPages {
        broken: broken.iter().map(|s| s.to_string()).collect(),
        fetched: Mutex::default(),
    });
    let limiter = RateLimiter::new(95, Duration::from_secs(1), Arc::new(ManualClock::default()));
    (
        OnlineFetcher::with_limiter(search.clone(), pages.clone(), limiter),
        pages,
        search,
    )
}

#[test]
fn online_rounds_fill_failures() {
    let (f, pages, _) = online(9, &["u1"]);
    let r = f.fetch_online("q", 3).unwrap();
    assert_eq!(r.rounds, 2);
    let urls: Vec<&str> = r.pages.iter().map(|p| p.url.as_str()).collect();
    assert_eq!(urls, vec!["u0", "u2", "u3"]);
    assert_eq!(r.failures.len(), 1);
    assert_eq!(r.pages[0].markdown, "Page u0");
    assert_eq!(pages.fetched.lock().unwrap().len(), 4);

    // Cached pages are not fetched again.
    f.fetch_online("q", 3).unwrap();
    assert_eq!(pages.fetched.lock().unwrap().len(), 5);
}

#[test]
fn online_stops_after_three_rounds() {
    let (f, _, _) = online(9, &["u0", "u1", "u2", "u3", "u4", "u5", "u6"]);
    let r = f.fetch_online("q", 3).unwrap();
    assert_eq!(r.rounds, 3);
    assert_eq!(r.pages.len(), 2);
}

#[test]
fn online_tries_each_candidate_once() {
    let (f, pages, search) = online(20, &["u0", "u1", "u2"]);
    let r = f.fetch_online("q", 1).unwrap();
    assert!(r.pages.is_empty());
    assert_eq!(r.rounds, 3);
    assert_eq!(r.failures.len(), 3);
    assert_eq!(*pages.fetched.lock().unwrap(), vec!["u0", "u1", "u2"]);
    assert_eq!(search.calls.load(Ordering::SeqCst), 1);
}

#[test]
fn online_search_failure_is_an_error() {
    let pages = Arc::new(StubPages {
        broken: HashSet::new(),
        fetched: Mutex::default(),
    });
    let f = OnlineFetcher::new(Arc::new(DownSearch), pages);
    assert_eq!(
        f.fetch_online("q", 3).unwrap_err(),
        OnlineError::SearchApiUnavailable("503".into())
    );
}

#[test]
fn cache_evicts_least_recent() {
    let c = PageCache::new(CACHE_CAPACITY);
    for i in 0..=CACHE_CAPACITY {
        c.put(&format!("u{i}"), String::new());
        if i == 5000 {
            c.get("u0");
        }
    }
    assert_eq!(c.len(), CACHE_CAPACITY);
    assert!(c.contains("u0"));
    assert!(!c.contains("u1"));
    assert!(c.contains(&format!("u{CACHE_CAPACITY}")));
}

/// Largest number of admissions inside any half-open window of `w`.
pub fn max_in_window(times: &[Duration], w: Duration) -> usize {
    (0..times.len())
        .map(|i| times[i..].iter().take_while(|t| **t < times[i] + w).count())
        .max()
        .unwrap_or(0)
}

#[test]
fn limiter_caps_burst() {
    let clock = Arc::new(ManualClock::default());
    let lim = RateLimiter::new(95, Duration::from_secs(1), clock.clone());
    let times: Vec<Duration> = (0..500).map(|_| lim.acquire()).collect();
    assert_eq!(max_in_window(&times, Duration::from_secs(1)), 95);
    assert!(times.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(times[95], Duration::from_secs(1));
}

#[test]
fn limiter_is_shared_across_threads() {
    let clock = Arc::new(ManualClock::default());
    let lim = Arc::new(RateLimiter::new(95, Duration::from_secs(1), clock.clone()));
    let times: Vec<Duration> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..8)
            .map(|_| {
                let lim = lim.clone();
                s.spawn(move || (0..60).map(|_| lim.acquire()).collect::<Vec<_>>())
            })
            .collect();
        hs.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    let mut times = times;
    times.sort();
    assert_eq!(times.len(), 480);
    assert!(max_in_window(&times, Duration::from_secs(1)) <= 95);
}
