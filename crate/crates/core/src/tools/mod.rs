//! Wire contract for external tools, retrying dispatch, and offline mocks.

pub mod mock;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, Ordering};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{AttentionBias, Mask};
use crate::layout::{BBox, SceneLayout};

pub use mock::{FaultInjector, MockTools};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolKind {
    TextToImage,
    Customize,
    LayoutToImage,
    LocalEdit,
    Verify,
    Segment,
    Complete,
}

impl ToolKind {
    pub const ALL: [ToolKind; 7] = [
        ToolKind::TextToImage,
        ToolKind::Customize,
        ToolKind::LayoutToImage,
        ToolKind::LocalEdit,
        ToolKind::Verify,
        ToolKind::Segment,
        ToolKind::Complete,
    ];

    pub fn route(self) -> &'static str {
        match self {
            ToolKind::TextToImage => "/v1/text2img",
            ToolKind::Customize => "/v1/customize",
            ToolKind::LayoutToImage => "/v1/layout2img",
            ToolKind::LocalEdit => "/v1/edit",
            ToolKind::Verify => "/v1/verify",
            ToolKind::Segment => "/v1/segment",
            ToolKind::Complete => "/v1/complete",
        }
    }

    pub fn from_route(route: &str) -> Option<ToolKind> {
        ToolKind::ALL.into_iter().find(|k| k.route() == route)
    }

    pub fn name(self) -> &'static str {
        match self {
            ToolKind::TextToImage => "text_to_image",
            ToolKind::Customize => "customize",
            ToolKind::LayoutToImage => "layout_to_image",
            ToolKind::LocalEdit => "local_edit",
            ToolKind::Verify => "verify",
            ToolKind::Segment => "segment",
            ToolKind::Complete => "complete",
        }
    }
}

/// An image carried inline as base64 PNG or by path on a shared filesystem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "encoding", rename_all = "snake_case")]
pub enum ImageRef {
    Png { data: String },
    Path { path: PathBuf },
}

impl ImageRef {
    pub fn from_image(img: &RgbImage) -> Result<Self> {
        Ok(ImageRef::Png { data: B64.encode(encode_png(img)?) })
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Self {
        ImageRef::Png { data: B64.encode(bytes) }
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        match self {
            ImageRef::Png { data } => B64.decode(data).map_err(|e| Error::Codec(format!("image base64: {e}"))),
            ImageRef::Path { path } => std::fs::read(path)
                .map_err(|e| Error::Codec(format!("cannot read image {}: {e}", path.display()))),
        }
    }

    pub fn load(&self) -> Result<RgbImage> {
        decode_png(&self.png_bytes()?)
    }
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| Error::Codec(format!("png encode: {e}")))?;
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map(|i| i.to_rgb8())
        .map_err(|e| Error::Codec(format!("png decode: {e}")))
}

pub fn encode_mask(mask: &Mask) -> String {
    B64.encode(mask.to_bytes())
}

pub fn decode_mask(data: &str) -> Result<Mask> {
    let bytes = B64.decode(data).map_err(|e| Error::Codec(format!("mask base64: {e}")))?;
    Mask::from_bytes(&bytes)
}

pub fn encode_bias(bias: &AttentionBias) -> String {
    B64.encode(bias.to_bytes())
}

pub fn decode_bias(data: &str) -> Result<AttentionBias> {
    let bytes = B64.decode(data).map_err(|e| Error::Codec(format!("bias base64: {e}")))?;
    AttentionBias::from_bytes(&bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptImages {
    pub object: usize,
    pub phrase: String,
    pub images: Vec<ImageRef>,
}

/// Bias grid (base64 `GDB1`) for one object's words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectBias {
    pub object: usize,
    pub bias: String,
}

/// Inner and outer masks (base64 `GDM1`) for one object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectRegion {
    pub object: usize,
    pub inner: String,
    pub outer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyQuestion {
    pub text: String,
    /// Object the question targets; only mock tools read it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToolRequest {
    TextToImage {
        prompt: String,
        seed: u64,
        /// Layout metadata for mock renderers; real servers ignore it.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        layout_meta: Option<SceneLayout>,
    },
    Customize {
        prompt: String,
        concepts: Vec<ConceptImages>,
        layout: SceneLayout,
        biases: Vec<ObjectBias>,
        condition: ImageRef,
        seed: u64,
    },
    LayoutToImage {
        prompt: String,
        layout: SceneLayout,
        regions: Vec<ObjectRegion>,
        seed: u64,
    },
    LocalEdit {
        image: ImageRef,
        /// Base64 `GDM1` pixel mask.
        mask: String,
        references: Vec<ImageRef>,
        target: String,
        bias: String,
        seed: u64,
    },
    Verify {
        image: ImageRef,
        questions: Vec<VerifyQuestion>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        layout_meta: Option<SceneLayout>,
    },
    Segment {
        image: ImageRef,
        caption: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        box_hint: Option<BBox>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        layout_meta: Option<SceneLayout>,
    },
    Complete {
        prompt: String,
    },
}

impl ToolRequest {
    pub fn kind(&self) -> ToolKind {
        match self {
            ToolRequest::TextToImage { .. } => ToolKind::TextToImage,
            ToolRequest::Customize { .. } => ToolKind::Customize,
            ToolRequest::LayoutToImage { .. } => ToolKind::LayoutToImage,
            ToolRequest::LocalEdit { .. } => ToolKind::LocalEdit,
            ToolRequest::Verify { .. } => ToolKind::Verify,
            ToolRequest::Segment { .. } => ToolKind::Segment,
            ToolRequest::Complete { .. } => ToolKind::Complete,
        }
    }

    /// Structural checks shared by the engine and the tool servers.
    pub fn check(&self) -> Result<()> {
        match self {
            ToolRequest::Customize { concepts, .. } => {
                if let Some(c) = concepts.iter().find(|c| c.images.is_empty()) {
                    return Err(Error::InvalidRequest(format!("concept {} has no images", c.object)));
                }
            }
            ToolRequest::LocalEdit { mask, .. }
                if decode_mask(mask)?.is_empty() => {
                    return Err(Error::EmptyMask);
                }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolAnswer {
    pub yes: bool,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    Images { images: Vec<ImageRef> },
    Answers { answers: Vec<ToolAnswer> },
    Mask { mask: String },
    Completion { text: String },
}

impl Payload {
    pub fn matches(&self, kind: ToolKind) -> bool {
        matches!(
            (self, kind),
            (
                Payload::Images { .. },
                ToolKind::TextToImage | ToolKind::Customize | ToolKind::LayoutToImage | ToolKind::LocalEdit
            ) | (Payload::Answers { .. }, ToolKind::Verify)
                | (Payload::Mask { .. }, ToolKind::Segment)
                | (Payload::Completion { .. }, ToolKind::Complete)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ToolResponse {
    Ok {
        payload: Payload,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        warnings: Vec<String>,
    },
    Error {
        code: String,
        message: String,
    },
}

impl ToolResponse {
    pub fn ok(payload: Payload) -> Self {
        ToolResponse::Ok { payload, warnings: Vec::new() }
    }

    pub fn error(code: &str, message: impl Into<String>) -> Self {
        ToolResponse::Error { code: code.into(), message: message.into() }
    }

    /// HTTP status used on the wire.
    pub fn http_status(&self) -> u16 {
        match self {
            ToolResponse::Ok { .. } => 200,
            ToolResponse::Error { .. } => 422,
        }
    }

    /// Payload of an ok response, or the semantic error as `ToolFailed`.
    pub fn into_payload(self, kind: ToolKind) -> Result<(Payload, Vec<String>)> {
        match self {
            ToolResponse::Ok { payload, warnings } => {
                if !payload.matches(kind) {
                    return Err(Error::ToolFailed {
                        kind,
                        code: "payload_mismatch".into(),
                        message: format!("payload does not match {} request", kind.name()),
                    });
                }
                Ok((payload, warnings))
            }
            ToolResponse::Error { code, message } => Err(Error::ToolFailed { kind, code, message }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EndpointTarget {
    Mock,
    Http { url: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolEndpoint {
    pub kind: ToolKind,
    pub target: EndpointTarget,
    pub timeout_ms: u64,
    pub max_retries: u32,
    /// Delay before retry `k` is `backoff_ms[min(k, len - 1)]`.
    #[serde(default)]
    pub backoff_ms: Vec<u64>,
}

impl ToolEndpoint {
    pub fn mock(kind: ToolKind) -> Self {
        Self { kind, target: EndpointTarget::Mock, timeout_ms: 30_000, max_retries: 0, backoff_ms: Vec::new() }
    }

    pub fn http(kind: ToolKind, base_url: &str) -> Self {
        Self {
            kind,
            target: EndpointTarget::Http { url: format!("{}{}", base_url.trim_end_matches('/'), kind.route()) },
            timeout_ms: 60_000,
            max_retries: 2,
            backoff_ms: vec![100, 400],
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.timeout_ms == 0 {
            return Err(Error::Config(format!("{} endpoint timeout must be positive", self.kind.name())));
        }
        Ok(())
    }

    fn backoff(&self, retry: usize) -> Duration {
        match self.backoff_ms.as_slice() {
            [] => Duration::ZERO,
            list => Duration::from_millis(list[retry.min(list.len() - 1)]),
        }
    }
}

/// Failure to obtain any response: timeout, refused connection, 5xx, or an
/// unreadable body. These are the only retryable failures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError(pub String);

pub trait Transport: Send + Sync {
    fn send(&self, endpoint: &ToolEndpoint, request: &ToolRequest) -> std::result::Result<ToolResponse, TransportError>;
}

/// Sends one request, retrying transport failures only.
pub fn dispatch(request: &ToolRequest, endpoint: &ToolEndpoint, transport: &dyn Transport) -> Result<ToolResponse> {
    if request.kind() != endpoint.kind {
        return Err(Error::KindMismatch { request: request.kind(), endpoint: endpoint.kind });
    }
    endpoint.check()?;
    let attempts = 1 + endpoint.max_retries;
    let mut last = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            std::thread::sleep(endpoint.backoff(attempt as usize - 1));
        }
        match transport.send(endpoint, request) {
            Ok(response) => return Ok(response),
            Err(TransportError(e)) => {
                tracing::warn!(kind = endpoint.kind.name(), attempt, error = %e, "tool transport failure");
                last = e;
            }
        }
    }
    Err(Error::ToolUnavailable { kind: endpoint.kind, attempts, last_error: last })
}

/// JSON over HTTP POST. A fresh blocking client per call keeps this usable
/// from any thread.
#[derive(Debug, Default, Clone)]
pub struct HttpTransport;

impl Transport for HttpTransport {
    fn send(&self, endpoint: &ToolEndpoint, request: &ToolRequest) -> std::result::Result<ToolResponse, TransportError> {
        let EndpointTarget::Http { url } = &endpoint.target else {
            return Err(TransportError("endpoint has no http target".into()));
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(endpoint.timeout_ms))
            .build()
            .map_err(|e| TransportError(e.to_string()))?;
        let resp = client.post(url).json(request).send().map_err(|e| TransportError(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(TransportError(format!("server error {status}")));
        }
        let body = resp.text().map_err(|e| TransportError(e.to_string()))?;
        match serde_json::from_str::<ToolResponse>(&body) {
            Ok(r) => Ok(r),
            Err(_) if status.is_client_error() => Ok(ToolResponse::error(
                &format!("http_{}", status.as_u16()),
                body.chars().take(200).collect::<String>(),
            )),
            Err(e) => Err(TransportError(format!("unreadable response: {e}"))),
        }
    }
}

/// Routes each endpoint to the mock suite or to HTTP.
pub struct ToolClient {
    pub endpoints: Vec<ToolEndpoint>,
    pub mock: MockTools,
    http: HttpTransport,
    calls: AtomicU32,
}

impl Transport for MockTools {
    fn send(&self, _endpoint: &ToolEndpoint, request: &ToolRequest) -> std::result::Result<ToolResponse, TransportError> {
        Ok(self.handle(request))
    }
}

impl ToolClient {
    pub fn new(endpoints: Vec<ToolEndpoint>, mock: MockTools) -> Self {
        Self { endpoints, mock, http: HttpTransport, calls: AtomicU32::new(0) }
    }

    /// All kinds served by the mock suite.
    pub fn all_mock(mock: MockTools) -> Self {
        Self::new(ToolKind::ALL.iter().map(|k| ToolEndpoint::mock(*k)).collect(), mock)
    }

    pub fn endpoint(&self, kind: ToolKind) -> Result<&ToolEndpoint> {
        self.endpoints
            .iter()
            .find(|e| e.kind == kind)
            .ok_or_else(|| Error::Config(format!("no endpoint configured for {}", kind.name())))
    }

    pub fn calls(&self) -> u32 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Dispatches and unwraps the payload; semantic errors become `ToolFailed`.
    pub fn call(&self, request: &ToolRequest) -> Result<(Payload, Vec<String>)> {
        request.check()?;
        let endpoint = self.endpoint(request.kind())?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let transport: &dyn Transport = match endpoint.target {
            EndpointTarget::Mock => &self.mock,
            EndpointTarget::Http { .. } => &self.http,
        };
        dispatch(request, endpoint, transport)?.into_payload(request.kind())
    }
}

/// Writes an image reference to disk as PNG bytes.
pub fn write_image(image: &ImageRef, path: &Path) -> Result<Vec<u8>> {
    let bytes = image.png_bytes()?;
    std::fs::write(path, &bytes)?;
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    struct Scripted {
        replies: Mutex<Vec<std::result::Result<ToolResponse, TransportError>>>,
        attempts: AtomicU32,
    }

    impl Scripted {
        fn new(mut replies: Vec<std::result::Result<ToolResponse, TransportError>>) -> Self {
            replies.reverse();
            Self { replies: Mutex::new(replies), attempts: AtomicU32::new(0) }
        }
    }

    impl Transport for Scripted {
        fn send(&self, _: &ToolEndpoint, _: &ToolRequest) -> std::result::Result<ToolResponse, TransportError> {
            self.attempts.fetch_add(1, Ordering::SeqCst);
            self.replies.lock().unwrap().pop().unwrap_or(Err(TransportError("refused".into())))
        }
    }

    fn complete() -> ToolRequest {
        ToolRequest::Complete { prompt: "Caption: a horse".into() }
    }

    fn endpoint(retries: u32) -> ToolEndpoint {
        ToolEndpoint { max_retries: retries, ..ToolEndpoint::mock(ToolKind::Complete) }
    }

    #[test]
    fn healthy_mock_answers_in_one_attempt() {
        let t = Scripted::new(vec![Ok(ToolResponse::ok(Payload::Completion { text: "x".into() }))]);
        let r = dispatch(&complete(), &endpoint(2), &t).unwrap();
        assert!(matches!(r, ToolResponse::Ok { .. }));
        assert_eq!(t.attempts.load(Ordering::SeqCst), 1);
        let r = dispatch(&complete(), &ToolEndpoint::mock(ToolKind::Complete), &MockTools::default()).unwrap();
        assert!(matches!(r, ToolResponse::Ok { payload: Payload::Completion { .. }, .. }));
    }

    #[test]
    fn refusing_endpoint_exhausts_attempts() {
        let t = Scripted::new(vec![]);
        let err = dispatch(&complete(), &endpoint(2), &t).unwrap_err();
        assert!(matches!(err, Error::ToolUnavailable { attempts: 3, .. }));
        assert_eq!(t.attempts.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn semantic_errors_are_not_retried() {
        let reply = ToolResponse::error("no_match", "nothing");
        let t = Scripted::new(vec![Ok(reply.clone())]);
        assert_eq!(dispatch(&complete(), &endpoint(5), &t).unwrap(), reply);
        assert_eq!(t.attempts.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn transient_failure_then_success() {
        let t = Scripted::new(vec![
            Err(TransportError("timeout".into())),
            Ok(ToolResponse::ok(Payload::Completion { text: "x".into() })),
        ]);
        assert!(dispatch(&complete(), &endpoint(1), &t).is_ok());
        assert_eq!(t.attempts.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn kind_mismatch() {
        let t = Scripted::new(vec![]);
        let err = dispatch(&complete(), &ToolEndpoint::mock(ToolKind::Verify), &t).unwrap_err();
        assert!(matches!(err, Error::KindMismatch { request: ToolKind::Complete, endpoint: ToolKind::Verify }));
        assert_eq!(t.attempts.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn unreachable_http_endpoint() {
        let ep = ToolEndpoint {
            max_retries: 1,
            backoff_ms: vec![1],
            timeout_ms: 500,
            ..ToolEndpoint::http(ToolKind::Complete, "http://127.0.0.1:9")
        };
        let err = dispatch(&complete(), &ep, &HttpTransport).unwrap_err();
        assert!(matches!(err, Error::ToolUnavailable { attempts: 2, .. }));
    }

    #[test]
    fn request_json_shape() {
        let v = serde_json::to_value(complete()).unwrap();
        assert_eq!(v, serde_json::json!({"kind": "complete", "prompt": "Caption: a horse"}));
        let r = ToolResponse::ok(Payload::Answers { answers: vec![ToolAnswer { yes: true, confidence: 1.0 }] });
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"status": "ok", "payload": {"type": "answers", "answers": [{"yes": true, "confidence": 1.0}]}})
        );
        assert_eq!(
            serde_json::to_value(ToolResponse::error("no_match", "m")).unwrap(),
            serde_json::json!({"status": "error", "code": "no_match", "message": "m"})
        );
    }

    #[test]
    fn routes_are_distinct() {
        for k in ToolKind::ALL {
            assert_eq!(ToolKind::from_route(k.route()), Some(k));
        }
    }

    #[test]
    fn empty_edit_mask_rejected() {
        let img = ImageRef::from_image(&RgbImage::new(4, 4)).unwrap();
        let req = ToolRequest::LocalEdit {
            image: img,
            mask: encode_mask(&Mask::new(4, 4)),
            references: vec![],
            target: "a cat".into(),
            bias: String::new(),
            seed: 0,
        };
        assert!(matches!(req.check(), Err(Error::EmptyMask)));
    }
}
