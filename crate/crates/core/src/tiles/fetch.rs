//! Static-map request construction and a cached, rate-limited fetch client.

use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use url::Url;

use super::{Domain, StyleSpec};
use crate::geo::SamplePoint;
use crate::raster::{Image, Rgb};
use crate::{Error, Result};

pub const STATIC_MAPS_ENDPOINT: &str = "https://maps.googleapis.com/maps/api/staticmap";
/// Environment variable holding the static-maps API key in online mode.
pub const API_KEY_ENV: &str = "URBANSSL_MAPS_API_KEY";
pub const MAX_ATTEMPTS: u32 = 3;

fn hex(c: Rgb) -> String {
    format!("0x{:02X}{:02X}{:02X}", c[0], c[1], c[2])
}

/// Style clauses in alphabetical feature order.
fn style_clauses(style: &StyleSpec) -> [String; 5] {
    [
        format!("feature:landscape|element:geometry|color:{}", hex(style.background_color)),
        format!("feature:poi.park|element:geometry|color:{}", hex(style.greenspace_color)),
        format!("feature:road|element:geometry|color:{}", hex(style.road_color)),
        format!("feature:transit|element:geometry|color:{}", hex(style.transit_color)),
        format!("feature:water|element:geometry|color:{}", hex(style.water_color)),
    ]
}

pub fn build_request(
    point: &SamplePoint,
    domain: Domain,
    zoom: u32,
    size_px: u32,
    style: &StyleSpec,
    api_key: &str,
) -> Result<String> {
    if size_px == 0 {
        return Err(Error::Validation("tile size must be positive".into()));
    }
    if zoom > 22 {
        return Err(Error::Validation(format!("zoom {zoom} outside [0, 22]")));
    }
    if api_key.trim().is_empty() {
        return Err(Error::Config(format!("an API key is required for online tiles (set {API_KEY_ENV})")));
    }
    style.validate()?;
    let mut params: Vec<(&str, String)> = vec![
        ("center", format!("{:.6},{:.6}", point.latitude, point.longitude)),
        ("zoom", zoom.to_string()),
        ("size", format!("{size_px}x{size_px}")),
        ("format", "png".into()),
    ];
    match domain {
        Domain::Satellite => params.push(("maptype", "satellite".into())),
        Domain::Map => {
            params.push(("maptype", "roadmap".into()));
            params.extend(style_clauses(style).into_iter().map(|c| ("style", c)));
        }
    }
    params.push(("key", api_key.to_string()));
    let url = Url::parse_with_params(STATIC_MAPS_ENDPOINT, &params).map_err(|e| Error::Config(e.to_string()))?;
    Ok(url.into())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

/// A blocking HTTP GET. `Err` is a transport failure with no status.
pub trait Transport: Send + Sync {
    fn get(&self, url: &str) -> std::result::Result<HttpResponse, String>;
}

/// Spaces calls at least `1 / rate` seconds apart.
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(requests_per_second: f64) -> Result<Self> {
        if !(requests_per_second.is_finite() && requests_per_second > 0.0) {
            return Err(Error::Config(format!("rate limit {requests_per_second} must be positive")));
        }
        Ok(RateLimiter { interval: Duration::from_secs_f64(1.0 / requests_per_second), next: Mutex::new(None) })
    }

    /// Blocks until the caller may issue a request.
    pub fn acquire(&self) {
        let wait = {
            let mut next = self.next.lock().unwrap_or_else(|e| e.into_inner());
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot - now
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

pub struct TileFetcher {
    transport: Box<dyn Transport>,
    limiter: RateLimiter,
    backoff: Duration,
}

fn retryable(status: u16) -> bool {
    status == 429 || status >= 500
}

impl TileFetcher {
    pub fn new(transport: Box<dyn Transport>, requests_per_second: f64) -> Result<Self> {
        Ok(TileFetcher { transport, limiter: RateLimiter::new(requests_per_second)?, backoff: Duration::from_millis(500) })
    }

    /// Base delay before the second attempt; doubled for each later one.
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    /// Returns the tile cached at `path`, fetching and storing it first if
    /// absent. A cached file that fails to decode is deleted.
    pub fn fetch_tile(&self, url: &str, path: &Path) -> Result<Image> {
        if path.exists() {
            return decode_or_evict(&std::fs::read(path)?, path);
        }
        let mut last_status = None;
        let mut message = String::new();
        for attempt in 0..MAX_ATTEMPTS {
            if attempt > 0 {
                thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            self.limiter.acquire();
            match self.transport.get(url) {
                Ok(resp) if resp.status == 200 => {
                    let image = Image::from_png_bytes(&resp.body)
                        .map_err(|e| Error::CorruptTile { path: path.to_path_buf(), message: e.to_string() })?;
                    store_atomically(path, &resp.body)?;
                    return Ok(image);
                }
                Ok(resp) => {
                    last_status = Some(resp.status);
                    message = format!("HTTP {}", resp.status);
                    if !retryable(resp.status) {
                        return Err(Error::Fetch { status: last_status, attempts: attempt + 1, message });
                    }
                }
                Err(e) => {
                    last_status = None;
                    message = e;
                }
            }
        }
        Err(Error::Fetch { status: last_status, attempts: MAX_ATTEMPTS, message })
    }
}

fn decode_or_evict(bytes: &[u8], path: &Path) -> Result<Image> {
    Image::from_png_bytes(bytes).map_err(|e| {
        let _ = std::fs::remove_file(path);
        Error::CorruptTile { path: path.to_path_buf(), message: e.to_string() }
    })
}

/// Writes through a temp file in the target directory and renames it into
/// place, so concurrent writers never expose a partial tile.
fn store_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[cfg(feature = "online")]
pub struct UreqTransport {
    agent: ureq::Agent,
}

#[cfg(feature = "online")]
impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        UreqTransport { agent: ureq::AgentBuilder::new().timeout(timeout).build() }
    }
}

#[cfg(feature = "online")]
impl Transport for UreqTransport {
    fn get(&self, url: &str) -> std::result::Result<HttpResponse, String> {
        use std::io::Read;
        let resp = match self.agent.get(url).call() {
            Ok(r) => r,
            Err(ureq::Error::Status(status, _)) => return Ok(HttpResponse { status, body: Vec::new() }),
            Err(e) => return Err(e.to_string()),
        };
        let status = resp.status();
        let mut body = Vec::new();
        resp.into_reader().read_to_end(&mut body).map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}
