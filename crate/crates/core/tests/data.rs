mod common;

use std::collections::HashSet;

use proptest::prelude::*;
use rand::Rng;
use trifuse::config::TextMode;
use trifuse::data::{make_batches, Batch, BatchText, Dataset, DatasetHeader, EmotionLabel, MultimodalSample};
use trifuse::error::Error;
use trifuse::model::AblationMode;
use trifuse::tape::Tape;
use trifuse::transformer::ForwardCtx;
use trifuse::{generate_synthetic, Model, SynthSpec};

#[test]
fn label_names_are_a_bijection() {
    let names: HashSet<&str> = EmotionLabel::ALL.iter().map(|l| l.name()).collect();
    assert_eq!(names.len(), 7);
    for (code, label) in EmotionLabel::ALL.iter().enumerate() {
        assert_eq!(label.code(), code);
        assert_eq!(EmotionLabel::from_code(code), Some(*label));
        assert_eq!(label.name().parse::<EmotionLabel>().unwrap(), *label);
        assert_eq!(label.name(), label.name().to_lowercase());
    }
    assert_eq!(
        EmotionLabel::ALL.map(|l| l.name()),
        ["joy", "anger", "sadness", "fear", "surprise", "disgust", "neutral"]
    );
    assert!(EmotionLabel::from_code(7).is_none());
}

#[test]
fn synthetic_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    for mode in [TextMode::Embeddings, TextMode::Tokens] {
        let spec = SynthSpec {
            n_samples: 35,
            text_mode: mode,
            text_dim: 15,
            seed: 4,
            ..SynthSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let path = dir.path().join(format!("{mode:?}.jsonl"));
        ds.save_jsonl(&path).unwrap();
        let loaded = trifuse::data::load_jsonl(&path).unwrap();
        assert_eq!(loaded, ds);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 36);
        assert_eq!(loaded.to_jsonl().unwrap(), text);
        assert_eq!(generate_synthetic(&spec).unwrap().to_jsonl().unwrap(), text);
    }
}

#[test]
fn header_field_names_are_fixed() {
    let header = DatasetHeader::new(3, 2, TextMode::Embeddings, 4);
    let v: serde_json::Value = serde_json::to_value(&header).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["format", "version", "d_img", "d_audio", "text_mode", "d_text"]);
    assert_eq!(v["format"], "trifuse-mmds");
    assert_eq!(v["version"], 1);
    assert_eq!(v["text_mode"], "embeddings");
}

/// Lines shaped like the offline MELD converter's output.
const EXTERNAL: &str = r#"{"format":"trifuse-mmds","version":1,"d_img":2,"d_audio":3,"text_mode":"embeddings","d_text":2}
{"id":"dia0_utt0","dialogue_id":"dia0","label":"joy","img":[[0.1,0.2],[0.3,0.4]],"audio":[[1,2,3]],"text_emb":[[0.5,-0.5],[1e-3,2]]}
{"id":"dia0_utt1","dialogue_id":"dia0","label":"neutral","img":[[0,0]],"audio":[[0,0,0],[1,1,1]],"text_emb":[[1,1]]}

{"id":"dia1_utt0","label":"disgust","img":[[5,5]],"audio":[[-1,-2,-3]],"text_emb":[[0,0]]}
"#;

#[test]
fn external_schema_loads() {
    let ds = Dataset::from_jsonl(EXTERNAL).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.samples[0].dialogue_id.as_deref(), Some("dia0"));
    assert_eq!(ds.samples[1].audio.len(), 2);
    assert_eq!(ds.samples[2].label, EmotionLabel::Disgust);
    assert_eq!(ds.split("all").unwrap().len(), 3);
    let mut histogram = [0usize; 7];
    for s in &ds.samples {
        histogram[s.label.code()] += 1;
    }
    assert_eq!(histogram, [1, 0, 0, 0, 0, 1, 1]);
    assert_eq!(Dataset::from_jsonl(&ds.to_jsonl().unwrap()).unwrap(), ds);
}

#[test]
fn header_only_file_is_an_empty_dataset() {
    let ds = Dataset::from_jsonl(EXTERNAL.lines().next().unwrap()).unwrap();
    assert!(ds.is_empty());
    assert!(matches!(ds.nonempty_split("all"), Err(Error::Config(_))));
}

fn line_error(text: &str) -> (usize, String) {
    match Dataset::from_jsonl(text).unwrap_err() {
        Error::Line { line, message } => (line, message),
        other => panic!("expected a line error, got {other:?}"),
    }
}

#[test]
fn loader_errors_name_the_line() {
    let header = EXTERNAL.lines().next().unwrap();
    let good = EXTERNAL.lines().nth(1).unwrap();

    let bad_label = good.replace("\"joy\"", "\"happiness\"");
    let (line, msg) = line_error(&format!("{header}\n{good}\n{}", bad_label.replace("dia0_utt0", "x")));
    assert_eq!(line, 3);
    assert!(msg.contains("happiness"));
    for name in ["joy", "anger", "sadness", "fear", "surprise", "disgust", "neutral"] {
        assert!(msg.contains(name), "{msg}");
    }

    let (line, msg) = line_error(&format!("{header}\n{good}\n{good}"));
    assert_eq!(line, 3);
    assert!(msg.contains("duplicate"), "{msg}");

    let (line, msg) = line_error(&format!("{header}\n{}", good.replace("[[1,2,3]]", "[[1,2]]")));
    assert_eq!(line, 2);
    assert!(msg.contains("d_audio"), "{msg}");

    let (line, _) = line_error(&format!("{header}\n{{\"id\": 3"));
    assert_eq!(line, 2);
    let (line, _) = line_error(&format!("{header}\n{}", good.replace("\"label\"", "\"emotion\"")));
    assert_eq!(line, 2);
    let (line, msg) = line_error(&format!("{header}\n{}", good.replace("\"text_emb\"", "\"text_tokens\"")));
    assert_eq!(line, 2, "{msg}");
    let (line, _) = line_error(&header.replace("trifuse-mmds", "other"));
    assert_eq!(line, 1);
    let (line, _) = line_error(&header.replace("\"version\":1", "\"version\":2"));
    assert_eq!(line, 1);
    let (line, _) = line_error(&format!("{header}\n{}", good.replace("[[0.1,0.2],[0.3,0.4]]", "[]")));
    assert_eq!(line, 2);
}

#[test]
fn split_lists_are_validated() {
    let ds = Dataset::from_jsonl(EXTERNAL).unwrap();
    let with = |splits: &[(&str, &[&str])]| {
        let mut header = ds.header.clone();
        header.splits = splits
            .iter()
            .map(|(n, ids)| (n.to_string(), ids.iter().map(|s| s.to_string()).collect()))
            .collect();
        Dataset::new(header, ds.samples.clone())
    };
    let ok = with(&[("train", &["dia0_utt0", "dia1_utt0"]), ("test", &["dia0_utt1"]), ("val", &[])]).unwrap();
    assert_eq!(ok.split("train").unwrap().len(), 2);
    assert!(ok.split("val").unwrap().is_empty());
    assert!(matches!(ok.nonempty_split("val"), Err(Error::Config(_))));
    assert!(matches!(ok.split("dev"), Err(Error::Config(_))));
    assert!(with(&[("train", &["dia0_utt0"]), ("test", &["dia0_utt0"])]).is_err());
    assert!(with(&[("train", &["nope"])]).is_err());
    assert!(with(&[("all", &["dia0_utt0"])]).is_err());
}

fn samples(seed: u64, n: usize, mode: TextMode) -> Vec<MultimodalSample> {
    let config = match mode {
        TextMode::Embeddings => common::tiny_config(),
        TextMode::Tokens => common::token_config(11),
    };
    common::random_samples(&mut common::rng(seed), &config, n, 6)
}

#[test]
fn batches_keep_the_partial_tail_and_mark_lengths() {
    for mode in [TextMode::Embeddings, TextMode::Tokens] {
        let all = samples(1, 10, mode);
        let refs: Vec<&MultimodalSample> = all.iter().collect();
        let mut rng = common::rng(0);
        let batches = make_batches(&refs, 4, Some(&mut rng)).unwrap();
        assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), [4, 4, 2]);
        let mut seen = HashSet::new();
        for batch in &batches {
            for b in 0..batch.len() {
                let s = all.iter().find(|s| s.id == batch.ids[b]).unwrap();
                assert!(seen.insert(s.id.clone()));
                assert_eq!(batch.labels[b], s.label);
                assert_eq!(batch.image_mask[b].iter().filter(|&&m| m).count(), s.image.len());
                assert_eq!(batch.audio_mask[b].iter().filter(|&&m| m).count(), s.audio.len());
                assert_eq!(batch.text_mask[b].iter().filter(|&&m| m).count(), s.text.len());
                let row = batch.row(b).unwrap();
                for (p, &valid) in row.image_mask.iter().enumerate() {
                    let frame = row.image.row(p);
                    if valid {
                        assert_eq!(frame, s.image.features.row(p));
                    } else {
                        assert!(frame.iter().all(|&v| v == 0.0));
                    }
                }
                if let BatchText::Tokens(rows) = &batch.text {
                    assert!(rows[b][s.text.len()..].iter().all(|&id| id == 0));
                }
            }
        }
        assert_eq!(seen.len(), 10);

        let again = make_batches(&refs, 4, Some(&mut common::rng(0))).unwrap();
        assert_eq!(again, batches);
        let ordered = make_batches(&refs, 4, None).unwrap();
        assert_eq!(ordered[0].ids, ["s0", "s1", "s2", "s3"]);
    }
    assert!(make_batches(&[], 4, None).unwrap().is_empty());
    assert!(make_batches(&[], 0, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn batching_is_loss_neutral(seed in any::<u64>(), n in 1usize..=6, tokens in any::<bool>()) {
        let mode = if tokens { TextMode::Tokens } else { TextMode::Embeddings };
        let all = samples(seed, n, mode);
        let config = if tokens { common::token_config(11) } else { common::tiny_config() };
        let model = Model::new(trifuse::ModelConfig { n_heads: 2, ..config }, seed).unwrap();
        let mode = [AblationMode::Full, AblationMode::TextOnly][common::rng(seed).gen_range(0..2)];

        let mut single = 0.0;
        for s in &all {
            single += model.forward_full(s, mode, &mut ForwardCtx::inference()).unwrap().1;
        }
        single /= n as f64;

        let refs: Vec<&MultimodalSample> = all.iter().collect();
        let batch = Batch::from_samples(&refs).unwrap();
        let mut tape = Tape::new();
        let bound = model.params().bind_frozen(&mut tape).unwrap();
        let out = model.forward_batch(&mut tape, &bound, &batch, mode, &mut ForwardCtx::inference()).unwrap();
        prop_assert!((tape.scalar(out.loss) - single).abs() < 1e-8);
    }
}

#[test]
fn synthetic_spec_validation() {
    let ds = generate_synthetic(&SynthSpec::default()).unwrap();
    let ids: Vec<&str> = ds.samples.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids.len(), 70);
    assert!(ds.samples.iter().all(|s| (2..=6).contains(&s.image.len())));
    for bad in [
        SynthSpec { d_img: 6, ..SynthSpec::default() },
        SynthSpec { seq_len: [(3, 2), (1, 1), (1, 1)], ..SynthSpec::default() },
        SynthSpec { separation: f64::NAN, ..SynthSpec::default() },
        SynthSpec { val_fraction: 0.6, test_fraction: 0.5, ..SynthSpec::default() },
        SynthSpec { text_mode: TextMode::Tokens, text_dim: 7, ..SynthSpec::default() },
    ] {
        assert!(matches!(generate_synthetic(&bad), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn uninformative_modalities_share_one_distribution() {
    // at informativeness 0 the per-class feature means agree up to sampling noise
    let ds = generate_synthetic(&SynthSpec {
        n_samples: 1400,
        informativeness: [0.0, 1.0, 0.0],
        separation: 2.0,
        seq_len: [(4, 4); 3],
        ..SynthSpec::default()
    })
    .unwrap();
    let class_mean = |c: usize, audio: bool, j: usize| {
        let rows: Vec<f64> = ds
            .samples
            .iter()
            .filter(|s| s.label.code() == c)
            .flat_map(|s| {
                let t = if audio { &s.audio.features } else { &s.image.features };
                (0..t.rows()).map(move |p| t.get(&[p, j])).collect::<Vec<_>>()
            })
            .collect();
        rows.iter().sum::<f64>() / rows.len() as f64
    };
    for c in 0..7 {
        assert!(class_mean(c, false, c).abs() < 0.15);
        assert!((class_mean(c, true, c) - 2.0).abs() < 0.15);
        assert!(class_mean(c, true, (c + 1) % 7).abs() < 0.15);
    }
}
