//! Online search and crawl: a search API adapter, concurrent page fetches
//! over up to three rounds, an LRU page cache and a sliding-window rate
//! limiter on search calls.

use std::collections::{HashSet, VecDeque};
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use lru::LruCache;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::html::HtmlCleaner;

pub const CACHE_CAPACITY: usize = 10_000;
pub const SEARCH_CALLS_PER_SECOND: usize = 95;
pub const MAX_ROUNDS: usize = 3;
pub const CANDIDATES_PER_RESULT: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub enum OnlineError {
    #[error("search api unavailable: {0}")]
    SearchApiUnavailable(String),
    #[error("fetch failed for {url}: {detail}")]
    Fetch { url: String, detail: String },
}

pub trait SearchApi: Send + Sync {
    /// Up to `count` result urls starting at `offset`.
    fn search(&self, query: &str, count: usize, offset: usize) -> Result<Vec<String>, OnlineError>;
}

pub trait PageFetcher: Send + Sync {
    /// Raw HTML of a page.
    fn fetch(&self, url: &str) -> Result<String, OnlineError>;
}

pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

pub struct SystemClock {
    start: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock {
            start: Instant::now(),
        }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.start.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Test clock that only moves when slept on or advanced.
#[derive(Default)]
pub struct ManualClock {
    now: Mutex<Duration>,
}

impl ManualClock {
    pub fn advance(&self, d: Duration) {
        *self.now.lock().expect("clock lock") += d;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        *self.now.lock().expect("clock lock")
    }

    fn sleep(&self, d: Duration) {
        self.advance(d);
    }
}

/// Sliding-window log limiter: at most `limit` admissions in any window of
/// length `window`.
pub struct RateLimiter {
    limit: usize,
    window: Duration,
    clock: Arc<dyn Clock>,
    log: Mutex<VecDeque<Duration>>,
}

impl RateLimiter {
    pub fn new(limit: usize, window: Duration, clock: Arc<dyn Clock>) -> Self {
        RateLimiter {
            limit,
            window,
            clock,
            log: Mutex::new(VecDeque::new()),
        }
    }

    pub fn per_second(limit: usize) -> Self {
        RateLimiter::new(limit, Duration::from_secs(1), Arc::new(SystemClock::default()))
    }

    /// Admits now if the window has room; otherwise returns how long to wait.
    pub fn try_acquire(&self) -> Result<Duration, Duration> {
        let now = self.clock.now();
        let mut log = self.log.lock().expect("limiter lock");
        while log.front().is_some_and(|t| now.saturating_sub(*t) >= self.window) {
            log.pop_front();
        }
        if log.len() < self.limit {
            log.push_back(now);
            Ok(now)
        } else {
            let oldest = *log.front().expect("full log is non-empty");
            Err(oldest + self.window - now)
        }
    }

    /// Blocks until admitted and returns the admission time.
    pub fn acquire(&self) -> Duration {
        loop {
            match self.try_acquire() {
                Ok(t) => return t,
                Err(wait) => self.clock.sleep(wait),
            }
        }
    }
}

/// Thread-safe LRU cache of cleaned pages keyed by url.
pub struct PageCache {
    inner: Mutex<LruCache<String, String>>,
}

impl PageCache {
    pub fn new(capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity).unwrap_or(NonZeroUsize::MIN);
        PageCache {
            inner: Mutex::new(LruCache::new(cap)),
        }
    }

    pub fn get(&self, url: &str) -> Option<String> {
        self.inner.lock().expect("cache lock").get(url).cloned()
    }

    pub fn put(&self, url: &str, markdown: String) {
        self.inner.lock().expect("cache lock").put(url.to_string(), markdown);
    }

    pub fn contains(&self, url: &str) -> bool {
        self.inner.lock().expect("cache lock").contains(url)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.inner.lock().expect("cache lock").cap().get()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlinePage {
    pub url: String,
    pub markdown: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineFetch {
    pub pages: Vec<OnlinePage>,
    pub rounds: usize,
    pub failures: Vec<OnlineError>,
}

pub struct OnlineFetcher {
    search: Arc<dyn SearchApi>,
    fetcher: Arc<dyn PageFetcher>,
    cleaner: HtmlCleaner,
    cache: PageCache,
    limiter: RateLimiter,
}

impl OnlineFetcher {
    pub fn new(search: Arc<dyn SearchApi>, fetcher: Arc<dyn PageFetcher>) -> Self {
        Self::with_limiter(search, fetcher, RateLimiter::per_second(SEARCH_CALLS_PER_SECOND))
    }

    pub fn with_limiter(
        search: Arc<dyn SearchApi>,
        fetcher: Arc<dyn PageFetcher>,
        limiter: RateLimiter,
    ) -> Self {
        OnlineFetcher {
            search,
            fetcher,
            cleaner: HtmlCleaner::new(),
            cache: PageCache::new(CACHE_CAPACITY),
            limiter,
        }
    }

    pub fn cache(&self) -> &PageCache {
        &self.cache
    }

    fn search(&self, query: &str, count: usize, offset: usize) -> Result<Vec<String>, OnlineError> {
        self.limiter.acquire();
        self.search.search(query, count, offset)
    }

    fn fetch_page(&self, url: &str) -> Result<String, OnlineError> {
        if let Some(md) = self.cache.get(url) {
            return Ok(md);
        }
        let html = self.fetcher.fetch(url)?;
        let md = self.cleaner.to_markdown(&html);
        if md.is_empty() {
            return Err(OnlineError::Fetch {
                url: url.to_string(),
                detail: "page has no text".into(),
            });
        }
        self.cache.put(url, md.clone());
        Ok(md)
    }

    /// Collects up to `k` cleaned pages. Only a failure of the first search
    /// call is an error; crawl failures are reported in the result.
    pub fn fetch_online(&self, query: &str, k: usize) -> Result<OnlineFetch, OnlineError> {
        let batch = k * CANDIDATES_PER_RESULT;
        let mut candidates = self.search(query, batch, 0)?;
        let mut offset = candidates.len();
        let mut exhausted = candidates.len() < batch;
        let mut tried = HashSet::new();
        let mut pages = Vec::new();
        let mut failures = Vec::new();
        let mut rounds = 0;

        while pages.len() < k && rounds < MAX_ROUNDS {
            let needed = k - pages.len();
            let mut untried: Vec<String> = candidates
                .iter()
                .filter(|u| !tried.contains(*u))
                .cloned()
                .collect();
            if untried.len() < needed && !exhausted && rounds > 0 {
                match self.search(query, batch, offset) {
                    Ok(more) => {
                        exhausted = more.len() < batch;
                        offset += more.len();
                        for u in more {
                            if !candidates.contains(&u) {
                                untried.push(u.clone());
                                candidates.push(u);
                            }
                        }
                    }
                    Err(e) => {
                        failures.push(e);
                        exhausted = true;
                    }
                }
            }
            if untried.is_empty() {
                break;
            }
            rounds += 1;
            let wave: Vec<String> = untried.into_iter().take(needed).collect();
            tried.extend(wave.iter().cloned());
            let results: Vec<(String, Result<String, OnlineError>)> = std::thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|u| s.spawn(move || (u.clone(), self.fetch_page(u))))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("fetch thread panicked"))
                    .collect()
            });
            for (url, r) in results {
                match r {
                    Ok(markdown) => pages.push(OnlinePage { url, markdown }),
                    Err(e) => failures.push(e),
                }
            }
        }
        Ok(OnlineFetch {
            pages,
            rounds,
            failures,
        })
    }
}

/// Bing Web Search v7 adapter.
pub struct BingSearch {
    endpoint: String,
    key: String,
    agent: ureq::Agent,
}

impl BingSearch {
    pub fn new(endpoint: &str, key: &str) -> Self {
        BingSearch {
            endpoint: endpoint.to_string(),
            key: key.to_string(),
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(20))
                .build(),
        }
    }
}

impl SearchApi for BingSearch {
    fn search(&self, query: &str, count: usize, offset: usize) -> Result<Vec<String>, OnlineError> {
        let resp = self
            .agent
            .get(&self.endpoint)
            .query("q", query)
            .query("count", &count.to_string())
            .query("offset", &offset.to_string())
            .set("Ocp-Apim-Subscription-Key", &self.key)
            .call()
            .map_err(|e| OnlineError::SearchApiUnavailable(e.to_string()))?;
        let text = resp
            .into_string()
            .map_err(|e| OnlineError::SearchApiUnavailable(e.to_string()))?;
        let body: Value = serde_json::from_str(&text)
            .map_err(|e| OnlineError::SearchApiUnavailable(e.to_string()))?;
        Ok(body["webPages"]["value"]
            .as_array()
            .map(|items| {
                items
                    .iter()
                    .filter_map(|v| v["url"].as_str().map(str::to_string))
                    .collect()
            })
            .unwrap_or_default())
    }
}

pub struct HttpFetcher {
    agent: ureq::Agent,
}

impl Default for HttpFetcher {
    fn default() -> Self {
        HttpFetcher {
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(20))
                .build(),
        }
    }
}

impl PageFetcher for HttpFetcher {
    fn fetch(&self, url: &str) -> Result<String, OnlineError> {
        let err = |detail: String| OnlineError::Fetch {
            url: url.to_string(),
            detail,
        };
        self.agent
            .get(url)
            .call()
            .map_err(|e| err(e.to_string()))?
            .into_string()
            .map_err(|e| err(e.to_string()))
    }
}
