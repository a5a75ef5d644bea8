//! Compact image summaries of utterance videos and conversation captions.
//!
//! Each utterance video becomes one image: nine equidistant frames in a 3x3
//! row-major grid with the spoken text printed in a band underneath. One
//! vision call describes each grid; the descriptions of a batch form a
//! partial caption, and partial captions are merged by a chat call.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::process::Command;

use base64::Engine;
use image::{ImageFormat, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Conversation;
use crate::gateway::{
    complete_with_retry, run_throttled, Backend, ChatMessage, EncodedImage, GatewayError, ModelRequest, RetryPolicy,
    SamplingParams, ThrottleLimits,
};
use crate::prompting::{PromptBuilder, PromptError};

pub const GRID_SIDE: usize = 3;
pub const FRAMES_PER_GRID: usize = GRID_SIDE * GRID_SIDE;

#[derive(Debug, Error)]
pub enum MontageError {
    #[error("expected {FRAMES_PER_GRID} frames, got {0}")]
    FrameCount(usize),
    #[error("frame {index} is {found:?}, expected {expected:?}")]
    DimensionMismatch {
        index: usize,
        expected: (u32, u32),
        found: (u32, u32),
    },
    #[error("cannot decode {path}: {message}")]
    VideoDecode { path: PathBuf, message: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("no utterance of conversation {0} has a readable video")]
    NothingToCaption(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Nine indices spread evenly over `[0, frame_count - 1]`, endpoints
/// included: `floor(i * (frame_count - 1) / 8)`.
pub fn sample_frames(frame_count: usize) -> [usize; FRAMES_PER_GRID] {
    let last = frame_count.saturating_sub(1);
    std::array::from_fn(|i| i * last / (FRAMES_PER_GRID - 1))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FramePlan {
    pub source: PathBuf,
    pub frame_indices: [usize; FRAMES_PER_GRID],
}

/// A decodable sequence of frames.
pub trait MediaSource {
    fn frame_count(&self) -> Result<usize, MontageError>;
    fn frame(&self, index: usize) -> Result<RgbImage, MontageError>;
}

/// A directory of still images standing in for a video; frames are the
/// image files in file-name order.
pub struct FrameDirectory {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl FrameDirectory {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, MontageError> {
        let root = root.into();
        let decode = |message: String| MontageError::VideoDecode {
            path: root.clone(),
            message,
        };
        let mut files: Vec<PathBuf> = fs::read_dir(&root)
            .map_err(|e| decode(e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(decode("no frame images".into()));
        }
        Ok(FrameDirectory { root, files })
    }
}

impl MediaSource for FrameDirectory {
    fn frame_count(&self) -> Result<usize, MontageError> {
        Ok(self.files.len())
    }

    fn frame(&self, index: usize) -> Result<RgbImage, MontageError> {
        let path = self.files.get(index).ok_or_else(|| MontageError::VideoDecode {
            path: self.root.clone(),
            message: format!("frame {index} out of range"),
        })?;
        image::open(path)
            .map(|img| img.to_rgb8())
            .map_err(|e| MontageError::VideoDecode {
                path: path.clone(),
                message: e.to_string(),
            })
    }
}

/// A video file decoded through the `ffprobe`/`ffmpeg` executables.
pub struct FfmpegVideo {
    path: PathBuf,
}

impl FfmpegVideo {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        FfmpegVideo { path: path.into() }
    }

    fn run(&self, program: &str, args: &[&str]) -> Result<Vec<u8>, MontageError> {
        let decode = |message: String| MontageError::VideoDecode {
            path: self.path.clone(),
            message,
        };
        let out = Command::new(program)
            .args(args)
            .output()
            .map_err(|e| decode(format!("{program}: {e}")))?;
        if !out.status.success() {
            return Err(decode(String::from_utf8_lossy(&out.stderr).trim().to_string()));
        }
        Ok(out.stdout)
    }
}

impl MediaSource for FfmpegVideo {
    fn frame_count(&self) -> Result<usize, MontageError> {
        let path = self.path.to_string_lossy();
        let out = self.run(
            "ffprobe",
            &[
                "-v",
                "error",
                "-select_streams",
                "v:0",
                "-count_packets",
                "-show_entries",
                "stream=nb_read_packets",
                "-of",
                "csv=p=0",
                &path,
            ],
        )?;
        String::from_utf8_lossy(&out)
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| MontageError::VideoDecode {
                path: self.path.clone(),
                message: "no video frames".into(),
            })
    }

    fn frame(&self, index: usize) -> Result<RgbImage, MontageError> {
        let path = self.path.to_string_lossy();
        let select = format!("select=eq(n\\,{index})");
        let png = self.run(
            "ffmpeg",
            &[
                "-v",
                "error",
                "-i",
                &path,
                "-vf",
                &select,
                "-vframes",
                "1",
                "-f",
                "image2pipe",
                "-vcodec",
                "png",
                "-",
            ],
        )?;
        image::load_from_memory_with_format(&png, ImageFormat::Png)
            .map(|img| img.to_rgb8())
            .map_err(|e| MontageError::VideoDecode {
                path: self.path.clone(),
                message: e.to_string(),
            })
    }
}

/// Frame directories for directories, ffmpeg for anything else.
pub fn open_media(path: &Path) -> Result<Box<dyn MediaSource>, MontageError> {
    if path.is_dir() {
        Ok(Box::new(FrameDirectory::open(path)?))
    } else if path.is_file() {
        Ok(Box::new(FfmpegVideo::new(path)))
    } else {
        Err(MontageError::VideoDecode {
            path: path.to_path_buf(),
            message: "no such file or directory".into(),
        })
    }
}

pub fn plan_frames(source: &Path, media: &dyn MediaSource) -> Result<FramePlan, MontageError> {
    let count = media.frame_count()?;
    Ok(FramePlan {
        source: source.to_path_buf(),
        frame_indices: sample_frames(count),
    })
}

const GLYPH: u32 = 8;

/// 3x3 frame grid with a text band underneath.
#[derive(Debug, Clone)]
pub struct GridImage {
    pub image: RgbImage,
    pub tile_width: u32,
    pub tile_height: u32,
    pub strip_height: u32,
    pub line_height: u32,
    /// Wrapped lines printed in the band.
    pub strip_lines: Vec<String>,
}

impl GridImage {
    /// Pixel at the centre of tile (`row`, `col`).
    pub fn tile_center(&self, row: u32, col: u32) -> Rgb<u8> {
        *self.image.get_pixel(
            col * self.tile_width + self.tile_width / 2,
            row * self.tile_height + self.tile_height / 2,
        )
    }

    pub fn to_png(&self) -> Vec<u8> {
        let mut buf = Cursor::new(Vec::new());
        self.image
            .write_to(&mut buf, ImageFormat::Png)
            .expect("PNG encoding of an in-memory RGB image");
        buf.into_inner()
    }

    pub fn encoded(&self) -> EncodedImage {
        EncodedImage {
            mime: "image/png".into(),
            data_base64: base64::engine::general_purpose::STANDARD.encode(self.to_png()),
        }
    }
}

fn wrap_text(text: &str, width_chars: usize) -> Vec<String> {
    let width = width_chars.max(1);
    let mut lines = Vec::new();
    let mut current = String::new();
    for word in text.split_whitespace() {
        let mut word: Vec<char> = word.chars().collect();
        while word.len() > width {
            if !current.is_empty() {
                lines.push(std::mem::take(&mut current));
            }
            lines.push(word.drain(..width).collect());
        }
        let word: String = word.into_iter().collect();
        let needed = if current.is_empty() {
            word.chars().count()
        } else {
            current.chars().count() + 1 + word.chars().count()
        };
        if needed > width && !current.is_empty() {
            lines.push(std::mem::take(&mut current));
        }
        if !current.is_empty() {
            current.push(' ');
        }
        current.push_str(&word);
    }
    if !current.is_empty() || lines.is_empty() {
        lines.push(current);
    }
    lines
}

fn draw_text(image: &mut RgbImage, x0: u32, y0: u32, text: &str, scale: u32) {
    use font8x8::UnicodeFonts;
    for (i, ch) in text.chars().enumerate() {
        let glyph = font8x8::BASIC_FONTS
            .get(ch)
            .or_else(|| font8x8::BASIC_FONTS.get('?'))
            .unwrap_or([0; 8]);
        let gx = x0 + i as u32 * GLYPH * scale;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..GLYPH {
                if bits >> col & 1 == 1 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            let (x, y) = (gx + col * scale + dx, y0 + row as u32 * scale + dy);
                            if x < image.width() && y < image.height() {
                                image.put_pixel(x, y, Rgb([255, 255, 255]));
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Places `frames` row-major into a 3x3 grid and prints `speaker_text`
/// (word-wrapped, white on black) below it.
pub fn compose_grid(frames: &[RgbImage], speaker_text: &str) -> Result<GridImage, MontageError> {
    if frames.len() != FRAMES_PER_GRID {
        return Err(MontageError::FrameCount(frames.len()));
    }
    let (tw, th) = frames[0].dimensions();
    for (index, f) in frames.iter().enumerate() {
        if f.dimensions() != (tw, th) {
            return Err(MontageError::DimensionMismatch {
                index,
                expected: (tw, th),
                found: f.dimensions(),
            });
        }
    }
    let side = GRID_SIDE as u32;
    let width = tw * side;
    let scale = if width >= 480 { 2 } else { 1 };
    let line_height = (GLYPH + 4) * scale;
    let margin = 2 * scale;
    let chars_per_line = (width.saturating_sub(2 * margin) / (GLYPH * scale)) as usize;
    let strip_lines = wrap_text(speaker_text, chars_per_line);
    let strip_height = strip_lines.len() as u32 * line_height;

    let mut image = RgbImage::from_pixel(width, th * side + strip_height, Rgb([0, 0, 0]));
    for (pos, frame) in frames.iter().enumerate() {
        let (row, col) = (pos as u32 / side, pos as u32 % side);
        image::imageops::replace(&mut image, frame, i64::from(col * tw), i64::from(row * th));
    }
    for (i, line) in strip_lines.iter().enumerate() {
        draw_text(
            &mut image,
            margin,
            th * side + i as u32 * line_height + 2 * scale,
            line,
            scale,
        );
    }
    Ok(GridImage {
        image,
        tile_width: tw,
        tile_height: th,
        strip_height,
        line_height,
        strip_lines,
    })
}

/// Samples and composes the grid for one utterance video.
pub fn grid_for_media(source: &Path, media: &dyn MediaSource, speaker_text: &str) -> Result<GridImage, MontageError> {
    let plan = plan_frames(source, media)?;
    let frames = plan
        .frame_indices
        .iter()
        .map(|i| media.frame(*i))
        .collect::<Result<Vec<_>, _>>()?;
    compose_grid(&frames, speaker_text)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionConfig {
    pub batch_size: usize,
    pub vision_model: String,
    pub chat_model: String,
    /// Base for relative video references.
    #[serde(default)]
    pub media_root: Option<PathBuf>,
    /// Write each grid as `<conversation>_<utterance>.png` here.
    #[serde(default)]
    pub dump_grids: Option<PathBuf>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub limits: ThrottleLimits,
}

impl Default for CaptionConfig {
    fn default() -> Self {
        CaptionConfig {
            batch_size: 8,
            vision_model: "gpt-4-vision-preview".into(),
            chat_model: "gpt-3.5-turbo".into(),
            media_root: None,
            dump_grids: None,
            retry: RetryPolicy::default(),
            limits: ThrottleLimits::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CaptionBatch {
    pub conversation_id: String,
    pub utterance_ids: Vec<u32>,
    pub partial_caption: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CaptionOutcome {
    pub caption: String,
    pub batches: Vec<CaptionBatch>,
    pub vision_calls: usize,
    pub stitch_calls: usize,
    /// Utterances without a usable video, with the reason.
    pub skipped: Vec<(u32, String)>,
}

fn non_empty(response: &crate::gateway::ModelResponse) -> Result<String, String> {
    response
        .as_text()
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .ok_or_else(|| "empty description".to_string())
}

/// Describes every utterance video of `conversation` and merges the batch
/// descriptions into one caption.
pub fn caption_conversation(
    conversation: &Conversation,
    backend: &dyn Backend,
    builder: &PromptBuilder<'_>,
    config: &CaptionConfig,
) -> Result<CaptionOutcome, MontageError> {
    let batch_size = config.batch_size.max(1);
    let resolve = |r: &str| match &config.media_root {
        Some(root) => root.join(r),
        None => PathBuf::from(r),
    };

    // Grids first; decoding failures skip the utterance.
    let mut skipped = Vec::new();
    let mut jobs = Vec::new();
    for u in &conversation.utterances {
        let Some(video) = &u.video_ref else {
            skipped.push((u.id, "no video reference".to_string()));
            continue;
        };
        let path = resolve(video);
        let grid = open_media(&path).and_then(|media| grid_for_media(&path, media.as_ref(), &u.line()));
        match grid {
            Ok(grid) => {
                if let Some(dir) = &config.dump_grids {
                    let out = dir.join(format!("{}_{}.png", conversation.id, u.id));
                    grid.image.save(&out).map_err(|e| MontageError::Io {
                        path: out.clone(),
                        message: e.to_string(),
                    })?;
                }
                jobs.push((u.id, u.line(), grid));
            }
            Err(err) => {
                log::warn!(
                    "conversation {} utterance {}: skipping video: {err}",
                    conversation.id,
                    u.id
                );
                skipped.push((u.id, err.to_string()));
            }
        }
    }
    if jobs.is_empty() {
        return Err(MontageError::NothingToCaption(conversation.id.clone()));
    }

    let described = run_throttled(jobs, config.limits, |(id, line, grid)| {
        let prompt = builder.video_caption_prompt(&line)?;
        let request = ModelRequest::Vision {
            model_id: config.vision_model.clone(),
            messages: vec![ChatMessage::user(prompt.text)],
            image: grid.encoded(),
            params: SamplingParams::default(),
        };
        let out = complete_with_retry(&request, backend, config.retry, non_empty)?;
        Ok::<_, MontageError>((id, out.value))
    });
    let described: BTreeMap<u32, String> = described.into_iter().collect::<Result<_, _>>()?;
    let vision_calls = described.len();

    let mut batches = Vec::new();
    for chunk in conversation.utterances.chunks(batch_size) {
        let lines: Vec<String> = chunk
            .iter()
            .filter_map(|u| {
                described
                    .get(&u.id)
                    .map(|d| format!("Utterance {} ({}): {}", u.id, u.speaker, d))
            })
            .collect();
        if lines.is_empty() {
            continue;
        }
        batches.push(CaptionBatch {
            conversation_id: conversation.id.clone(),
            utterance_ids: chunk.iter().map(|u| u.id).collect(),
            partial_caption: lines.join("\n"),
        });
    }

    let total_batches = conversation.len().div_ceil(batch_size);
    let (caption, stitch_calls) = if total_batches > 1 {
        let partials: Vec<String> = batches.iter().map(|b| b.partial_caption.clone()).collect();
        let prompt = builder.caption_stitch_prompt(&partials)?;
        let request = ModelRequest::chat(&config.chat_model, vec![ChatMessage::user(prompt.text)]);
        (
            complete_with_retry(&request, backend, config.retry, non_empty)?.value,
            1,
        )
    } else {
        (batches[0].partial_caption.clone(), 0)
    };

    Ok(CaptionOutcome {
        caption,
        batches,
        vision_calls,
        stitch_calls,
        skipped,
    })
}

/// `{conversation_id: caption}`
pub type CaptionCache = BTreeMap<String, String>;

pub fn load_captions(path: impl AsRef<Path>) -> Result<CaptionCache, MontageError> {
    let path = path.as_ref();
    let io = |message: String| MontageError::Io {
        path: path.to_path_buf(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| io(e.to_string()))
}

pub fn save_captions(path: impl AsRef<Path>, captions: &CaptionCache) -> Result<(), MontageError> {
    let path = path.as_ref();
    fs::write(
        path,
        serde_json::to_string_pretty(captions).expect("captions serialize"),
    )
    .map_err(|e| MontageError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
