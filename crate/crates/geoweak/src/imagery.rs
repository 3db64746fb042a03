//! Imagery tiles and the adapters that fetch them.
//!
//! Two adapters implement [`ImageryAdapter`]: a local-directory adapter that
//! reads PNGs named by rounded coordinates (deterministic, used by tests and
//! the offline demo), and a remote HTTP adapter driven by a URL template with
//! retrying and an API key from `GEOWEAK_IMAGERY_KEY`.

use std::path::{Path, PathBuf};
use std::time::Duration;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::geo::GeoPoint;

/// Environment variable holding the remote imagery API key.
pub const IMAGERY_KEY_ENV: &str = "GEOWEAK_IMAGERY_KEY";

/// An RGB raster crop centered on a geolocated point.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTile {
    pub pixels: RgbImage,
    /// Meters per pixel.
    pub mpp: f64,
    pub center: GeoPoint,
    /// Provenance string, also the tile's stable id.
    pub source_id: String,
}

impl ImageTile {
    pub fn new(pixels: RgbImage, mpp: f64, center: GeoPoint, source_id: impl Into<String>) -> Result<Self> {
        if pixels.width() == 0 || pixels.height() == 0 {
            return Err(Error::InvalidInput("tile raster must be non-empty".into()));
        }
        if mpp <= 0.0 || !mpp.is_finite() {
            return Err(Error::InvalidInput(format!("mpp {mpp} must be > 0")));
        }
        Ok(ImageTile {
            pixels,
            mpp,
            center,
            source_id: source_id.into(),
        })
    }

    /// (height, width) in pixels.
    pub fn size_px(&self) -> (u32, u32) {
        (self.pixels.height(), self.pixels.width())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.pixels
            .save(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
    }
}

/// Loads an RGB PNG from disk, normalizing other color layouts to RGB8.
pub fn load_png(path: &Path) -> Result<RgbImage> {
    let dynimg = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(ref ioe) if ioe.kind() == std::io::ErrorKind::NotFound => {
            Error::NotFound(format!("tile file {}", path.display()))
        }
        other => Error::Decode(format!("{}: {other}", path.display())),
    })?;
    Ok(dynimg.to_rgb8())
}

/// Source of imagery tiles keyed by center point, size, and resolution.
pub trait ImageryAdapter: Send + Sync {
    fn fetch(&self, center: &GeoPoint, size_px: (u32, u32), mpp: f64) -> Result<ImageTile>;
}

/// Validates preconditions then delegates to the adapter.
pub fn fetch_tile(
    adapter: &dyn ImageryAdapter,
    center: &GeoPoint,
    size_px: (u32, u32),
    mpp: f64,
) -> Result<ImageTile> {
    if size_px.0 == 0 || size_px.1 == 0 {
        return Err(Error::InvalidInput(format!("tile size {size_px:?} must be positive")));
    }
    if mpp <= 0.0 || !mpp.is_finite() {
        return Err(Error::InvalidInput(format!("mpp {mpp} must be > 0")));
    }
    adapter.fetch(center, size_px, mpp)
}

/// File name used by the local adapter: coordinates rounded to 5 decimals
/// (~1 m), which is finer than the 300 m spacing floor.
pub fn tile_filename(lat: f64, lon: f64) -> String {
    format!("tile_{lat:.5}_{lon:.5}.png")
}

/// Reads tiles from a directory of PNGs named by [`tile_filename`].
pub struct LocalDirAdapter {
    pub dir: PathBuf,
}

impl LocalDirAdapter {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        LocalDirAdapter { dir: dir.into() }
    }
}

impl ImageryAdapter for LocalDirAdapter {
    fn fetch(&self, center: &GeoPoint, size_px: (u32, u32), _mpp: f64) -> Result<ImageTile> {
        let path = self.dir.join(tile_filename(center.lat, center.lon));
        if !path.exists() {
            return Err(Error::NotFound(format!(
                "tile {} for point {}",
                path.display(),
                center.id
            )));
        }
        let pixels = load_png(&path)?;
        if (pixels.height(), pixels.width()) != size_px {
            return Err(Error::Decode(format!(
                "tile {} is {}x{}, requested {}x{}",
                path.display(),
                pixels.height(),
                pixels.width(),
                size_px.0,
                size_px.1
            )));
        }
        ImageTile::new(pixels, _mpp, center.clone(), center.id.clone())
    }
}

/// Byte-level HTTP access, injectable so network paths are testable via
/// recorded fixtures. POST has a non-retryable default for transports that
/// only ever serve GET fixtures.
pub trait HttpTransport: Send + Sync {
    fn get(&self, url: &str) -> Result<Vec<u8>>;

    fn post(&self, url: &str, _body: &[u8], _content_type: &str) -> Result<Vec<u8>> {
        Err(Error::Backend(format!("POST {url}: transport does not support POST")))
    }
}

/// Default transport backed by a blocking HTTP client.
pub struct UreqTransport {
    timeout: Duration,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        UreqTransport { timeout }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        UreqTransport::new(Duration::from_secs(30))
    }
}

fn read_response(url: &str, response: ureq::Response) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    response
        .into_reader()
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Network(format!("{url}: {e}")))?;
    Ok(bytes)
}

fn map_ureq_error(verb: &str, url: &str, e: ureq::Error) -> Error {
    match e {
        ureq::Error::Status(404, _) => Error::NotFound(format!("{verb} {url} -> 404")),
        ureq::Error::Status(code, _) => Error::Network(format!("{verb} {url} -> status {code}")),
        ureq::Error::Transport(t) => Error::Network(format!("{verb} {url}: {t}")),
    }
}

impl HttpTransport for UreqTransport {
    fn get(&self, url: &str) -> Result<Vec<u8>> {
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let response = agent.get(url).call().map_err(|e| map_ureq_error("GET", url, e))?;
        read_response(url, response)
    }

    fn post(&self, url: &str, body: &[u8], content_type: &str) -> Result<Vec<u8>> {
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let response = agent
            .post(url)
            .set("Content-Type", content_type)
            .send_bytes(body)
            .map_err(|e| map_ureq_error("POST", url, e))?;
        read_response(url, response)
    }
}

/// Exponential backoff schedule for retryable failures.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 500,
        }
    }
}

impl RetryPolicy {
    /// Runs `op`, retrying on retryable errors with doubling delays.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T>) -> Result<T> {
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt + 1 < self.max_attempts => {
                    let delay = self.base_delay_ms.saturating_mul(1 << attempt);
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Fetches tiles from an HTTP endpoint. The URL template may reference
/// `{lat}`, `{lon}`, `{w}`, `{h}`, `{mpp}`, and `{key}`.
pub struct RemoteAdapter {
    url_template: String,
    api_key: Option<String>,
    transport: Box<dyn HttpTransport>,
    retry: RetryPolicy,
}

impl RemoteAdapter {
    /// Builds an adapter reading the API key from [`IMAGERY_KEY_ENV`].
    pub fn from_env(url_template: impl Into<String>, transport: Box<dyn HttpTransport>) -> Self {
        RemoteAdapter {
            url_template: url_template.into(),
            api_key: std::env::var(IMAGERY_KEY_ENV).ok(),
            transport,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_key(
        url_template: impl Into<String>,
        api_key: Option<String>,
        transport: Box<dyn HttpTransport>,
        retry: RetryPolicy,
    ) -> Self {
        RemoteAdapter {
            url_template: url_template.into(),
            api_key,
            transport,
            retry,
        }
    }

    fn render_url(&self, center: &GeoPoint, size_px: (u32, u32), mpp: f64) -> String {
        self.url_template
            .replace("{lat}", &center.lat.to_string())
            .replace("{lon}", &center.lon.to_string())
            .replace("{h}", &size_px.0.to_string())
            .replace("{w}", &size_px.1.to_string())
            .replace("{mpp}", &mpp.to_string())
            .replace("{key}", self.api_key.as_deref().unwrap_or(""))
    }
}

impl ImageryAdapter for RemoteAdapter {
    fn fetch(&self, center: &GeoPoint, size_px: (u32, u32), mpp: f64) -> Result<ImageTile> {
        let url = self.render_url(center, size_px, mpp);
        let bytes = self.retry.run(|| self.transport.get(&url))?;
        let pixels = image::load_from_memory(&bytes)
            .map_err(|e| Error::Decode(format!("tile for {}: {e}", center.id)))?
            .to_rgb8();
        ImageTile::new(pixels, mpp, center.clone(), center.id.clone())
    }
}
