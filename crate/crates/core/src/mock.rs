//! Deterministic in-process implementation of every backend capability.
//!
//! Outputs are pure functions of the request, so every pipeline property
//! can be asserted exactly:
//!
//! * `text_encode`: tokens are whitespace-split. With
//!   `G = SHA256(len(p1) ‖ p1 ‖ len(p2) ‖ p2 ‖ …)` over the whole prompt
//!   group (lengths as u32 LE), token `w` fills its row of width `d` from the
//!   counter-mode stream `SHA256(G ‖ len(w) ‖ w ‖ seed_le64 ‖ ctr_le32)`,
//!   4 bytes per value, mapped as `u32 / 2^32 * 2 - 1`.
//! * `vae_encode`: the latent id is the hex SHA-256 over
//!   `SHA256(image) ‖ scale_le64` for each image in order.
//! * `dit_decode`: a 64x64 PNG rendered from
//!   `SHA256(SHA256(state) ‖ latent_id ‖ seed_le64)`: desaturated 8x8 blocks
//!   plus one saturated figure.
//! * The analysis capabilities (tracking, embeddings, faces, shot labels)
//!   work on saturated colour blobs, the figures of the synthetic images.
//!
//! Every request is logged and counted per capability, and faults can be
//! injected per capability or per request.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Cursor;
use std::sync::atomic::{AtomicBool, Ordering};

use image::{Rgb, RgbImage};
use parking_lot::Mutex;
use sha2::{Digest, Sha256};

use crate::backend::{BackendError, BackendResult, Capability, ModelBackend};
use crate::protocol::*;
use crate::story::DEFAULT_SHOT_LABELS;
use crate::tensor::{b64_decode, b64_encode, f32_from_le_bytes, f32_to_le_bytes};

pub const MOCK_RASTER: u32 = 64;
pub const MOCK_EMBED_DIM: usize = 64;
/// Minimum channel spread for a pixel to count as part of a figure.
const SATURATION: u8 = 96;

/// `n_bytes` of SHA-256 counter-mode output keyed by `material`.
pub fn expand_hash(material: &[u8], n_bytes: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(n_bytes + 32);
    let mut ctr: u32 = 0;
    while out.len() < n_bytes {
        let mut h = Sha256::new();
        h.update(material);
        h.update(ctr.to_le_bytes());
        out.extend_from_slice(&h.finalize());
        ctr += 1;
    }
    out.truncate(n_bytes);
    out
}

/// Maps 4 stream bytes to a value in [-1, 1).
pub fn unit_value(bytes: [u8; 4]) -> f32 {
    (u32::from_le_bytes(bytes) as f64 / 4_294_967_296.0 * 2.0 - 1.0) as f32
}

fn stream_values(material: &[u8], count: usize) -> Vec<f32> {
    expand_hash(material, count * 4)
        .chunks_exact(4)
        .map(|c| unit_value([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn prompt_group_digest(prompts: &[String]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in prompts {
        h.update((p.len() as u32).to_le_bytes());
        h.update(p.as_bytes());
    }
    h.finalize().into()
}

/// A request as received, for payload inspection in tests.
#[derive(Clone, Debug)]
pub enum MockCall {
    TextEncode(TextEncodeRequest),
    VaeEncode(VaeEncodeRequest),
    DitDecode(DitDecodeRequest),
    Ti2v(Ti2vRequest),
    Llm(LlmRequest),
    ImageGenerate(ImageGenerateRequest),
    TuneStep(TuneStepRequest),
    /// Analysis calls: capability and digest of the image or text.
    Analysis(Capability, String),
}

impl MockCall {
    pub fn capability(&self) -> Capability {
        match self {
            MockCall::TextEncode(_) => Capability::TextEncode,
            MockCall::VaeEncode(_) => Capability::VaeEncode,
            MockCall::DitDecode(_) => Capability::DitDecode,
            MockCall::Ti2v(_) => Capability::Ti2v,
            MockCall::Llm(_) => Capability::LlmComplete,
            MockCall::ImageGenerate(_) => Capability::ImageGenerate,
            MockCall::TuneStep(_) => Capability::TuneStep,
            MockCall::Analysis(cap, _) => *cap,
        }
    }
}

type Matcher = Box<dyn Fn(&MockCall) -> bool + Send + Sync>;

struct Fault {
    cap: Capability,
    remaining: u32,
    error: BackendError,
    matcher: Option<Matcher>,
}

pub struct MockBackend {
    caps: BTreeSet<Capability>,
    dim: usize,
    offline: AtomicBool,
    counts: Mutex<BTreeMap<Capability, u64>>,
    log: Mutex<Vec<MockCall>>,
    faults: Mutex<Vec<Fault>>,
    llm_script: Mutex<VecDeque<String>>,
    abort_at_decode: Option<u64>,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new(2048)
    }
}

impl MockBackend {
    /// A mock offering every capability, with hidden-state width `dim`.
    pub fn new(dim: usize) -> Self {
        Self {
            caps: Capability::ALL.into_iter().collect(),
            dim,
            offline: AtomicBool::new(false),
            counts: Mutex::new(BTreeMap::new()),
            log: Mutex::new(Vec::new()),
            faults: Mutex::new(Vec::new()),
            llm_script: Mutex::new(VecDeque::new()),
            abort_at_decode: None,
        }
    }

    pub fn with_capabilities(mut self, caps: impl IntoIterator<Item = Capability>) -> Self {
        self.caps = caps.into_iter().collect();
        self
    }

    /// Aborts the whole process when the `n`-th decode call (1-based)
    /// arrives. Crash-recovery testing only.
    pub fn abort_process_at_decode(mut self, n: u64) -> Self {
        self.abort_at_decode = Some(n);
        self
    }

    pub fn set_offline(&self, offline: bool) {
        self.offline.store(offline, Ordering::SeqCst);
    }

    /// Queues literal LLM responses, served before auto-generated ones.
    pub fn script_llm<I: IntoIterator<Item = String>>(&self, responses: I) {
        self.llm_script.lock().extend(responses);
    }

    /// Fails the next `times` calls of `cap`.
    pub fn fail_next(&self, cap: Capability, times: u32, error: BackendError) {
        self.faults.lock().push(Fault {
            cap,
            remaining: times,
            error,
            matcher: None,
        });
    }

    /// Fails the next `times` calls of `cap` whose request satisfies `matcher`.
    pub fn fail_matching(
        &self,
        cap: Capability,
        times: u32,
        error: BackendError,
        matcher: impl Fn(&MockCall) -> bool + Send + Sync + 'static,
    ) {
        self.faults.lock().push(Fault {
            cap,
            remaining: times,
            error,
            matcher: Some(Box::new(matcher)),
        });
    }

    pub fn count(&self, cap: Capability) -> u64 {
        self.counts.lock().get(&cap).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> BTreeMap<Capability, u64> {
        self.counts.lock().clone()
    }

    pub fn calls(&self) -> Vec<MockCall> {
        self.log.lock().clone()
    }

    pub fn reset_log(&self) {
        self.log.lock().clear();
        self.counts.lock().clear();
    }

    fn enter(&self, call: MockCall) -> BackendResult<()> {
        let cap = call.capability();
        let n = {
            let mut counts = self.counts.lock();
            let c = counts.entry(cap).or_default();
            *c += 1;
            *c
        };
        if cap == Capability::DitDecode && self.abort_at_decode == Some(n) {
            tracing::error!("mock backend: simulated crash at decode call {n}");
            std::process::abort();
        }
        let fault = {
            let mut faults = self.faults.lock();
            let hit = faults.iter_mut().find(|f| {
                f.cap == cap && f.remaining > 0 && f.matcher.as_ref().is_none_or(|m| m(&call))
            });
            hit.map(|f| {
                f.remaining -= 1;
                f.error.clone()
            })
        };
        self.log.lock().push(call);
        if self.offline.load(Ordering::SeqCst) {
            return Err(BackendError::Unreachable("mock backend is offline".into()));
        }
        match fault {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn check_version(v: u32) -> BackendResult<()> {
        if v == PROTOCOL_VERSION {
            Ok(())
        } else {
            Err(BackendError::Protocol(format!(
                "protocol_version {v}, expected {PROTOCOL_VERSION}"
            )))
        }
    }
}

fn decode_b64(s: &str) -> BackendResult<Vec<u8>> {
    b64_decode(s).map_err(|e| BackendError::Protocol(e.to_string()))
}

fn load_rgb(bytes: &[u8]) -> BackendResult<RgbImage> {
    image::load_from_memory(bytes)
        .map(|i| i.to_rgb8())
        .map_err(|e| BackendError::Remote {
            status: 422,
            message: format!("undecodable image: {e}"),
            retryable: false,
        })
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    out.into_inner()
}

fn short_hex(bytes: &[u8]) -> String {
    crate::asset::sha256_hex(bytes)
}

/// Desaturated 8x8 block background keyed by `material`.
fn block_background(material: &[u8], size: u32) -> RgbImage {
    let blocks = size.div_ceil(8);
    let stream = expand_hash(material, (blocks * blocks * 2) as usize);
    RgbImage::from_fn(size, size, |x, y| {
        let b = ((y / 8) * blocks + (x / 8)) as usize;
        let base = 64 + (stream[2 * b] % 96);
        let tint = stream[2 * b + 1] % 32;
        Rgb([base, base.saturating_add(tint / 2), base.saturating_add(tint)])
    })
}

fn paint_figure(img: &mut RgbImage, channel: usize, shade: u8, bbox: BBox) {
    for y in bbox.y..(bbox.y + bbox.h).min(img.height()) {
        for x in bbox.x..(bbox.x + bbox.w).min(img.width()) {
            let mut px = [16u8, 16, 16];
            px[channel] = 200u8.saturating_add(shade % 56);
            img.put_pixel(x, y, Rgb(px));
        }
    }
}

/// Saturated pixels grouped by dominant channel: (channel, bbox, pixel count).
pub fn find_blobs(img: &RgbImage) -> Vec<(usize, BBox, u64)> {
    let mut acc: [Option<(u32, u32, u32, u32, u64)>; 3] = [None; 3];
    for (x, y, p) in img.enumerate_pixels() {
        let [r, g, b] = p.0;
        let (mx, mn) = (r.max(g).max(b), r.min(g).min(b));
        if mx - mn < SATURATION {
            continue;
        }
        let ch = if r == mx {
            0
        } else if g == mx {
            1
        } else {
            2
        };
        let e = acc[ch].get_or_insert((x, y, x, y, 0));
        e.0 = e.0.min(x);
        e.1 = e.1.min(y);
        e.2 = e.2.max(x);
        e.3 = e.3.max(y);
        e.4 += 1;
    }
    acc.iter()
        .enumerate()
        .filter_map(|(ch, e)| {
            e.map(|(x0, y0, x1, y1, n)| {
                (
                    ch,
                    BBox {
                        x: x0,
                        y: y0,
                        w: x1 - x0 + 1,
                        h: y1 - y0 + 1,
                    },
                    n,
                )
            })
        })
        .collect()
}

/// 4x4x4 colour histogram, L2-normalised.
fn histogram<'a>(pixels: impl Iterator<Item = &'a Rgb<u8>>) -> Vec<f32> {
    let mut h = vec![0f32; MOCK_EMBED_DIM];
    for p in pixels {
        let [r, g, b] = p.0;
        h[(r as usize / 64) * 16 + (g as usize / 64) * 4 + b as usize / 64] += 1.0;
    }
    let norm = h.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm > 0.0 {
        h.iter_mut().for_each(|v| *v /= norm);
    }
    h
}

fn region_pixels(img: &RgbImage, bbox: BBox) -> impl Iterator<Item = &Rgb<u8>> {
    img.enumerate_pixels()
        .filter(move |(x, y, _)| {
            *x >= bbox.x && *x < bbox.x + bbox.w && *y >= bbox.y && *y < bbox.y + bbox.h
        })
        .map(|(_, _, p)| p)
}

fn is_saturated(p: &Rgb<u8>) -> bool {
    let [r, g, b] = p.0;
    r.max(g).max(b) - r.min(g).min(b) >= SATURATION
}

/// Shot band from the largest figure's share of the frame.
pub fn shot_band(area_fraction: f64, n_labels: usize) -> usize {
    const BANDS: [f64; 4] = [0.5, 0.3, 0.15, 0.05];
    let band = BANDS.iter().take_while(|&&t| area_fraction < t).count();
    band.min(n_labels.saturating_sub(1))
}

/// Synthetic reference image: a character gets a saturated figure on a
/// desaturated backdrop, a background gets the backdrop only.
pub fn synthetic_reference(key: &str, kind: &str, seed: u64) -> Vec<u8> {
    let mut material = Vec::new();
    material.extend_from_slice(key.as_bytes());
    material.push(0);
    material.extend_from_slice(kind.as_bytes());
    material.extend_from_slice(&seed.to_le_bytes());
    let mut img = block_background(&material, MOCK_RASTER);
    if kind == "character" {
        let h = expand_hash(&material, 4);
        let side = 20 + (h[1] % 16) as u32;
        let off = (MOCK_RASTER - side) / 2;
        paint_figure(
            &mut img,
            h[0] as usize % 3,
            h[2],
            BBox {
                x: off,
                y: off,
                w: side,
                h: side,
            },
        );
    }
    encode_png(&img)
}

/// Decoder raster for a combined hash.
fn render_keyframe(combined: &[u8; 32]) -> Vec<u8> {
    let mut img = block_background(combined, MOCK_RASTER);
    let h = expand_hash(&[combined.as_slice(), b"figure"].concat(), 8);
    let w = 8 + (h[1] as u32 % 48);
    let hh = 8 + (h[2] as u32 % 48);
    let x = h[3] as u32 % (MOCK_RASTER - w + 1);
    let y = h[4] as u32 % (MOCK_RASTER - hh + 1);
    paint_figure(&mut img, h[0] as usize % 3, h[5], BBox { x, y, w, h: hh });
    encode_png(&img)
}

fn auto_director_response(prompt: &str, seed: u64) -> String {
    let field = |prefix: &str| {
        prompt
            .lines()
            .find_map(|l| l.trim().strip_prefix(prefix).map(|v| v.trim().to_string()))
    };
    let n: usize = field("Number of scripts:").and_then(|v| v.parse().ok()).unwrap_or(8);
    let labels: Vec<String> = field("Allowed shot types:")
        .map(|v| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
        .unwrap_or_else(|| DEFAULT_SHOT_LABELS.iter().map(|s| s.to_string()).collect());
    let description = prompt
        .split_once("Story description:")
        .map(|(_, rest)| rest.lines().skip_while(|l| l.trim().is_empty()).next().unwrap_or(""))
        .unwrap_or("")
        .trim()
        .to_string();

    let mut pinned: Vec<(String, String)> = prompt
        .lines()
        .filter_map(|l| l.trim().strip_prefix("Pinned character:"))
        .filter_map(|v| v.split_once('|'))
        .map(|(k, c)| (k.trim().to_string(), c.trim().to_string()))
        .collect();
    let digest = Sha256::new()
        .chain_update(description.as_bytes())
        .chain_update(seed.to_le_bytes())
        .finalize();
    const NAMES: [&str; 8] = ["mira", "otto", "lena", "kai", "juno", "bram", "ines", "taro"];
    const PLACES: [&str; 4] = ["harbor", "forest", "library", "rooftop"];
    let mut i = digest[0] as usize;
    while pinned.len() < 2 {
        let name = NAMES[i % NAMES.len()].to_string();
        i += 1;
        if pinned.iter().all(|(k, _)| k != &name) {
            pinned.push((name.clone(), format!("{name}, a character in the story")));
        }
    }
    let place = PLACES[digest[1] as usize % PLACES.len()];
    let (a, b) = (&pinned[0].0, &pinned[1].0);
    let scripts: Vec<serde_json::Value> = (1..=n)
        .map(|t| {
            let chars: Vec<&String> = match t % 4 {
                1 | 3 => vec![a],
                2 => vec![a, b],
                _ => vec![b],
            };
            let shot = &labels[(digest[2 + t % 28] as usize + t) % labels.len().max(1)];
            let who = chars.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" and ");
            serde_json::json!({
                "t": t,
                "prompt": format!("{who} at the {place}, beat {t} of: {description}"),
                "characters": chars,
                "background": place,
                "shot": shot,
            })
        })
        .collect();
    serde_json::json!({
        "characters": pinned.iter().map(|(k, c)| serde_json::json!({"key": k, "caption": c})).collect::<Vec<_>>(),
        "backgrounds": [{"key": place, "caption": format!("the {place}")}],
        "scripts": scripts,
    })
    .to_string()
}

impl ModelBackend for MockBackend {
    fn name(&self) -> String {
        "mock".into()
    }

    fn capabilities(&self) -> BTreeSet<Capability> {
        self.caps.clone()
    }

    fn describe(&self) -> CapabilitiesResponse {
        CapabilitiesResponse {
            protocol_version: PROTOCOL_VERSION,
            name: self.name(),
            capabilities: self.caps.iter().copied().collect(),
            shot_labels: DEFAULT_SHOT_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn text_encode(&self, req: &TextEncodeRequest) -> BackendResult<TextEncodeResponse> {
        Self::check_version(req.protocol_version)?;
        self.enter(MockCall::TextEncode(req.clone()))?;
        let group = prompt_group_digest(&req.prompt_group);
        let states = req
            .prompt_group
            .iter()
            .map(|prompt| {
                let tokens: Vec<&str> = prompt.split_whitespace().collect();
                let mut values = Vec::with_capacity(tokens.len() * self.dim);
                for tok in &tokens {
                    let mut material = group.to_vec();
                    material.extend_from_slice(&(tok.len() as u32).to_le_bytes());
                    material.extend_from_slice(tok.as_bytes());
                    material.extend_from_slice(&req.seed.to_le_bytes());
                    values.extend(stream_values(&material, self.dim));
                }
                EncodedState {
                    tokens_b64: b64_encode(&f32_to_le_bytes(&values)),
                    l: tokens.len(),
                    d: self.dim,
                }
            })
            .collect();
        Ok(TextEncodeResponse {
            protocol_version: PROTOCOL_VERSION,
            states,
        })
    }

    fn vae_encode(&self, req: &VaeEncodeRequest) -> BackendResult<VaeEncodeResponse> {
        Self::check_version(req.protocol_version)?;
        self.enter(MockCall::VaeEncode(req.clone()))?;
        let mut h = Sha256::new();
        for img in &req.images {
            h.update(Sha256::digest(decode_b64(&img.data_b64)?));
            h.update(img.scale.to_le_bytes());
        }
        let digest = hex::encode(h.finalize());
        Ok(VaeEncodeResponse {
            protocol_version: PROTOCOL_VERSION,
            latent_id: digest.clone(),
            digest,
        })
    }

    fn dit_decode(&self, req: &DitDecodeRequest) -> BackendResult<ImageResponse> {
        Self::check_version(req.protocol_version)?;
        self.enter(MockCall::DitDecode(req.clone()))?;
        let state = decode_b64(&req.state_b64)?;
        if state.len() != req.rows * req.d * 4 {
            return Err(BackendError::Protocol(format!(
                "state holds {} bytes, expected {}x{} f32",
                state.len(),
                req.rows,
                req.d
            )));
        }
        let combined: [u8; 32] = Sha256::new()
            .chain_update(Sha256::digest(&state))
            .chain_update(req.latent_id.as_bytes())
            .chain_update(req.seed.to_le_bytes())
            .finalize()
            .into();
        Ok(ImageResponse {
            protocol_version: PROTOCOL_VERSION,
            image_b64: b64_encode(&render_keyframe(&combined)),
        })
    }

    fn ti2v_generate(&self, req: &Ti2vRequest) -> BackendResult<Ti2vResponse> {
        Self::check_version(req.protocol_version)?;
        self.enter(MockCall::Ti2v(req.clone()))?;
        let image = decode_b64(&req.image_b64)?;
        let (w, h) = crate::asset::image_dims(&image).map_err(|e| BackendError::Remote {
            status: 422,
            message: e.to_string(),
            retryable: false,
        })?;
        let digest = Sha256::new()
            .chain_update(Sha256::digest(&image))
            .chain_update(req.prompt.as_bytes())
            .chain_update(req.frames.to_le_bytes())
            .chain_update(req.fps.to_le_bytes())
            .chain_update(req.seed.to_le_bytes())
            .finalize();
        let mut stub = b"MOCKCLIP".to_vec();
        for v in [req.frames, req.fps, w, h] {
            stub.extend_from_slice(&v.to_le_bytes());
        }
        stub.extend_from_slice(&digest);
        Ok(Ti2vResponse {
            protocol_version: PROTOCOL_VERSION,
            video_b64: Some(b64_encode(&stub)),
            asset_url: None,
            width: Some(w),
            height: Some(h),
        })
    }

    fn llm_complete(&self, req: &LlmRequest) -> BackendResult<LlmResponse> {
        Self::check_version(req.protocol_version)?;
        self.enter(MockCall::Llm(req.clone()))?;
        let text = match self.llm_script.lock().pop_front() {
            Some(t) => t,
            None => {
                let first_user = req
                    .messages
                    .iter()
                    .find(|m| m.role == "user")
                    .map(|m| m.content.as_str())
                    .unwrap_or("");
                auto_director_response(first_user, req.seed)
            }
        };
        Ok(LlmResponse {
            protocol_version: PROTOCOL_VERSION,
            text,
        })
    }

    fn image_generate(&self, req: &ImageGenerateRequest) -> BackendResult<ImageResponse> {
        Self::check_version(req.protocol_version)?;
        self.enter(MockCall::ImageGenerate(req.clone()))?;
        Ok(ImageResponse {
            protocol_version: PROTOCOL_VERSION,
            image_b64: b64_encode(&synthetic_reference(&req.key, &req.kind, req.seed)),
        })
    }

    fn embed_image(&self, req: &EmbedImageRequest) -> BackendResult<EmbeddingResponse> {
        Self::check_version(req.protocol_version)?;
        let bytes = decode_b64(&req.image_b64)?;
        self.enter(MockCall::Analysis(Capability::EmbedImage, short_hex(&bytes)))?;
        let img = load_rgb(&bytes)?;
        let bbox = req.bbox.unwrap_or(BBox {
            x: 0,
            y: 0,
            w: img.width(),
            h: img.height(),
        });
        Ok(EmbeddingResponse {
            protocol_version: PROTOCOL_VERSION,
            vector: histogram(region_pixels(&img, bbox)),
        })
    }

    fn embed_text(&self, req: &EmbedTextRequest) -> BackendResult<EmbeddingResponse> {
        Self::check_version(req.protocol_version)?;
        self.enter(MockCall::Analysis(Capability::EmbedText, short_hex(req.text.as_bytes())))?;
        let mut v = vec![0f32; MOCK_EMBED_DIM];
        for tok in req.text.split_whitespace() {
            let h = Sha256::digest(tok.to_lowercase().as_bytes());
            v[h[0] as usize % MOCK_EMBED_DIM] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(EmbeddingResponse {
            protocol_version: PROTOCOL_VERSION,
            vector: v,
        })
    }

    fn segment(&self, req: &ImageRequest) -> BackendResult<SegmentResponse> {
        Self::check_version(req.protocol_version)?;
        let bytes = decode_b64(&req.image_b64)?;
        self.enter(MockCall::Analysis(Capability::Segment, short_hex(&bytes)))?;
        let img = load_rgb(&bytes)?;
        let total = (img.width() * img.height()) as f64;
        let fg_count = img.pixels().filter(|p| is_saturated(p)).count();
        let (fg, bg, coverage) = if fg_count > 0 {
            (
                histogram(img.pixels().filter(|p| is_saturated(p))),
                histogram(img.pixels().filter(|p| !is_saturated(p))),
                fg_count as f64 / total,
            )
        } else {
            // No figure: the central quarter stands in for the foreground.
            let (w, h) = (img.width(), img.height());
            let centre = BBox {
                x: w / 4,
                y: h / 4,
                w: w / 2,
                h: h / 2,
            };
            let inside = |x: u32, y: u32| {
                x >= centre.x && x < centre.x + centre.w && y >= centre.y && y < centre.y + centre.h
            };
            (
                histogram(region_pixels(&img, centre)),
                histogram(img.enumerate_pixels().filter(|(x, y, _)| !inside(*x, *y)).map(|(_, _, p)| p)),
                centre.area() as f64 / total,
            )
        };
        Ok(SegmentResponse {
            protocol_version: PROTOCOL_VERSION,
            fg,
            bg,
            mask_coverage: coverage,
        })
    }

    fn face_embed(&self, req: &ImageRequest) -> BackendResult<FaceEmbedResponse> {
        Self::check_version(req.protocol_version)?;
        let bytes = decode_b64(&req.image_b64)?;
        self.enter(MockCall::Analysis(Capability::FaceEmbed, short_hex(&bytes)))?;
        let img = load_rgb(&bytes)?;
        let faces = find_blobs(&img)
            .into_iter()
            .map(|(_, bbox, _)| histogram(region_pixels(&img, bbox).filter(|p| is_saturated(p))))
            .collect();
        Ok(FaceEmbedResponse {
            protocol_version: PROTOCOL_VERSION,
            faces,
        })
    }

    fn shot_classify(&self, req: &ShotClassifyRequest) -> BackendResult<ShotClassifyResponse> {
        Self::check_version(req.protocol_version)?;
        let bytes = decode_b64(&req.image_b64)?;
        self.enter(MockCall::Analysis(Capability::ShotClassify, short_hex(&bytes)))?;
        if req.labels.is_empty() {
            return Err(BackendError::Remote {
                status: 400,
                message: "no labels requested".into(),
                retryable: false,
            });
        }
        let img = load_rgb(&bytes)?;
        let total = (img.width() * img.height()) as f64;
        let largest = find_blobs(&img).into_iter().map(|(_, b, _)| b.area()).max().unwrap_or(0);
        let band = shot_band(largest as f64 / total, req.labels.len());
        let mut scores = vec![0f32; req.labels.len()];
        scores[band] = 1.0;
        Ok(ShotClassifyResponse {
            protocol_version: PROTOCOL_VERSION,
            label: req.labels[band].clone(),
            scores,
        })
    }

    fn aesthetics(&self, req: &ImageRequest) -> BackendResult<AestheticsResponse> {
        Self::check_version(req.protocol_version)?;
        let bytes = decode_b64(&req.image_b64)?;
        self.enter(MockCall::Analysis(Capability::Aesthetics, short_hex(&bytes)))?;
        let img = load_rgb(&bytes)?;
        let luma: Vec<f64> = img
            .pixels()
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect();
        let mean = luma.iter().sum::<f64>() / luma.len() as f64;
        let var = luma.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / luma.len() as f64;
        Ok(AestheticsResponse {
            protocol_version: PROTOCOL_VERSION,
            iqs: mean / 255.0,
            ias: (var.sqrt() / 128.0).min(1.0),
        })
    }

    fn track(&self, req: &TrackRequest) -> BackendResult<TrackResponse> {
        Self::check_version(req.protocol_version)?;
        let mut frames = Vec::with_capacity(req.frames_b64.len());
        let mut h = Sha256::new();
        for f in &req.frames_b64 {
            let bytes = decode_b64(f)?;
            h.update(Sha256::digest(&bytes));
            frames.push(bytes);
        }
        self.enter(MockCall::Analysis(Capability::Track, hex::encode(h.finalize())))?;
        let mut tracks: BTreeMap<usize, Vec<Observation>> = BTreeMap::new();
        for (i, bytes) in frames.iter().enumerate() {
            for (ch, bbox, _) in find_blobs(&load_rgb(bytes)?) {
                tracks.entry(ch).or_default().push(Observation {
                    frame: i as u32,
                    bbox,
                });
            }
        }
        Ok(TrackResponse {
            protocol_version: PROTOCOL_VERSION,
            tracks: tracks
                .into_iter()
                .map(|(ch, observations)| Track {
                    id: ch as u32 + 1,
                    observations,
                })
                .collect(),
        })
    }

    fn caption(&self, req: &ImageRequest) -> BackendResult<CaptionResponse> {
        Self::check_version(req.protocol_version)?;
        let bytes = decode_b64(&req.image_b64)?;
        self.enter(MockCall::Analysis(Capability::Caption, short_hex(&bytes)))?;
        let img = load_rgb(&bytes)?;
        let blobs = find_blobs(&img);
        const COLOURS: [&str; 3] = ["red", "green", "blue"];
        let figures: Vec<&str> = blobs.iter().map(|(ch, _, _)| COLOURS[*ch]).collect();
        let text = if figures.is_empty() {
            "an empty scene".to_string()
        } else {
            format!("a scene with the {} figure", figures.join(" and "))
        };
        Ok(CaptionResponse {
            protocol_version: PROTOCOL_VERSION,
            text,
        })
    }

    fn tune_step(&self, req: &TuneStepRequest) -> BackendResult<TuneStepResponse> {
        Self::check_version(req.protocol_version)?;
        self.enter(MockCall::TuneStep(req.clone()))?;
        let mut loss = 0f64;
        let mut gradients = Vec::with_capacity(req.entries.len());
        for e in &req.entries {
            let values = f32_from_le_bytes(&decode_b64(&e.values_b64)?);
            if values.len() != e.n * e.d {
                return Err(BackendError::Protocol(format!("entry {} has wrong size", e.label)));
            }
            let target = mock_tune_target(&e.label, values.len());
            let grad: Vec<f32> = values
                .iter()
                .zip(&target)
                .map(|(v, t)| {
                    let diff = *v as f64 - *t as f64;
                    loss += diff * diff;
                    (2.0 * diff) as f32
                })
                .collect();
            gradients.push(PrefixEntryPayload {
                label: e.label.clone(),
                n: e.n,
                d: e.d,
                values_b64: b64_encode(&f32_to_le_bytes(&grad)),
            });
        }
        Ok(TuneStepResponse {
            protocol_version: PROTOCOL_VERSION,
            loss,
            gradients,
        })
    }
}

/// Optimum the mock's `tune_step` objective pulls each shot label towards.
pub fn mock_tune_target(label: &str, len: usize) -> Vec<f32> {
    stream_values(&[b"tune-target:".as_slice(), label.as_bytes()].concat(), len)
        .into_iter()
        .map(|v| v * 0.05)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoder_is_deterministic_and_seed_sensitive() {
        let mock = MockBackend::new(4);
        let req = |seed| DitDecodeRequest {
            protocol_version: PROTOCOL_VERSION,
            state_b64: b64_encode(&f32_to_le_bytes(&[0.5; 8])),
            rows: 2,
            d: 4,
            latent_id: "abc".into(),
            seed,
            decoder_params: BTreeMap::new(),
        };
        let a = mock.dit_decode(&req(1)).unwrap();
        let b = mock.dit_decode(&req(1)).unwrap();
        let c = mock.dit_decode(&req(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(mock.count(Capability::DitDecode), 3);
    }

    #[test]
    fn figures_are_tracked_and_classified() {
        let mut img = block_background(b"x", 64);
        paint_figure(&mut img, 2, 0, BBox { x: 10, y: 10, w: 40, h: 40 });
        let blobs = find_blobs(&img);
        assert_eq!(blobs, vec![(2, BBox { x: 10, y: 10, w: 40, h: 40 }, 1600)]);
        // 1600 / 4096 = 0.39 -> close-up band
        assert_eq!(shot_band(1600.0 / 4096.0, 5), 1);
        assert_eq!(shot_band(0.0, 5), 4);
        assert_eq!(shot_band(0.9, 5), 0);
    }

    #[test]
    fn backgrounds_are_desaturated() {
        let bg = image::load_from_memory(&synthetic_reference("park", "background", 0))
            .unwrap()
            .to_rgb8();
        assert!(find_blobs(&bg).is_empty());
        let ch = image::load_from_memory(&synthetic_reference("hero", "character", 0))
            .unwrap()
            .to_rgb8();
        assert_eq!(find_blobs(&ch).len(), 1);
    }

    #[test]
    fn faults_and_offline() {
        let mock = MockBackend::new(4);
        let req = EmbedTextRequest {
            protocol_version: PROTOCOL_VERSION,
            text: "a cat".into(),
        };
        mock.fail_next(Capability::EmbedText, 1, BackendError::Timeout("slow".into()));
        assert!(mock.embed_text(&req).is_err());
        assert!(mock.embed_text(&req).is_ok());
        mock.set_offline(true);
        assert!(matches!(mock.embed_text(&req), Err(BackendError::Unreachable(_))));
    }

    #[test]
    fn rejects_other_protocol_versions() {
        let mock = MockBackend::new(4);
        let req = EmbedTextRequest {
            protocol_version: 99,
            text: "a".into(),
        };
        assert!(matches!(mock.embed_text(&req), Err(BackendError::Protocol(_))));
    }
}
