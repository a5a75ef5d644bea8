mod support;

use std::sync::Arc;

use eca_core::gateway::{Backend, Cassette, CassetteMode, OfflineBackend, RetryPolicy};
use eca_core::montage::{
    caption_conversation, load_captions, open_media, plan_frames, sample_frames, CaptionConfig, MontageError,
};
use eca_core::prompting::{CharHeuristic, PromptBuilder, TemplateSet};
use support::{fixtures, Simulator, E02_FRAMES};

fn config(batch_size: usize) -> CaptionConfig {
    CaptionConfig {
        batch_size,
        media_root: Some(fixtures()),
        retry: RetryPolicy {
            max_attempts: 2,
            backoff_ms: 0,
        },
        ..CaptionConfig::default()
    }
}

fn e02() -> eca_core::Conversation {
    support::eval().into_iter().find(|c| c.id == "e02").unwrap()
}

#[test]
fn frame_directories_sample_nine() {
    for (u, count) in E02_FRAMES.iter().enumerate() {
        let path = fixtures().join(format!("media/e02_u{}", u + 1));
        let media = open_media(&path).unwrap();
        let plan = plan_frames(&path, media.as_ref()).unwrap();
        assert_eq!(media.frame_count().unwrap(), *count);
        assert_eq!(plan.frame_indices, sample_frames(*count));
    }
}

#[test]
fn replayed_batches_stitch_into_shipped_caption() {
    let offline: Arc<dyn Backend> = Arc::new(OfflineBackend::default());
    let cassette = Cassette::load(fixtures().join("cassette.json"), CassetteMode::Replay, Some(offline)).unwrap();
    let templates = TemplateSet::default();
    let builder = PromptBuilder::new(&templates, &CharHeuristic);
    let shipped = load_captions(fixtures().join("captions.json")).unwrap();
    for _ in 0..2 {
        let out = caption_conversation(&e02(), &cassette, &builder, &config(2)).unwrap();
        assert_eq!(out.batches.len(), 2);
        assert_eq!(out.batches[0].utterance_ids, vec![1, 2]);
        assert_eq!(out.batches[1].utterance_ids, vec![3, 4]);
        assert_eq!((out.vision_calls, out.stitch_calls), (4, 1));
        assert_eq!(out.caption, shipped["e02"]);
        assert!(out.skipped.is_empty());
    }
}

#[test]
fn single_batch_skips_stitch() {
    let sim = Simulator::fixture();
    let templates = TemplateSet::default();
    let builder = PromptBuilder::new(&templates, &CharHeuristic);
    let mut conv = e02();
    conv.utterances.truncate(2);
    let out = caption_conversation(&conv, &sim, &builder, &config(8)).unwrap();
    assert_eq!((out.batches.len(), out.vision_calls, out.stitch_calls), (1, 2, 0));
    assert_eq!(sim.calls(), 2);
    assert_eq!(out.caption, out.batches[0].partial_caption);
}

#[test]
fn unreadable_video_is_skipped() {
    let sim = Simulator::fixture();
    let templates = TemplateSet::default();
    let builder = PromptBuilder::new(&templates, &CharHeuristic);
    let mut conv = e02();
    conv.utterances[2].video_ref = Some("media/does_not_exist.mp4".into());
    let out = caption_conversation(&conv, &sim, &builder, &config(2)).unwrap();
    assert_eq!(out.vision_calls, 3);
    assert_eq!(out.skipped.len(), 1);
    assert_eq!(out.skipped[0].0, 3);
    assert!(!out.caption.is_empty());
    assert!(!out.batches[1].partial_caption.contains("Utterance 3"));
}

#[test]
fn nothing_readable_is_an_error() {
    let sim = Simulator::fixture();
    let templates = TemplateSet::default();
    let builder = PromptBuilder::new(&templates, &CharHeuristic);
    let conv = support::eval().into_iter().find(|c| c.id == "e01").unwrap();
    let err = caption_conversation(&conv, &sim, &builder, &config(2)).unwrap_err();
    assert!(matches!(err, MontageError::NothingToCaption(_)));
    assert_eq!(sim.calls(), 0);
}

#[test]
fn grids_can_be_dumped() {
    let dir = tempfile::tempdir().unwrap();
    let sim = Simulator::fixture();
    let templates = TemplateSet::default();
    let builder = PromptBuilder::new(&templates, &CharHeuristic);
    let cfg = CaptionConfig {
        dump_grids: Some(dir.path().to_path_buf()),
        ..config(4)
    };
    caption_conversation(&e02(), &sim, &builder, &cfg).unwrap();
    let grid = image::open(dir.path().join("e02_1.png")).unwrap().to_rgb8();
    assert_eq!(grid.width(), 48);
    assert!(grid.height() > 36);
}
