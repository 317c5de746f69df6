use proptest::prelude::*;

use super::*;
use rand::Rng;

fn small(n: usize, seed: u64) -> CorpusConfig {
    CorpusConfig {
        n_videos: n,
        seed,
        ..CorpusConfig::default()
    }
}

#[test]
fn generation_is_deterministic() {
    let v = EventVocab::default();
    let a = gen_corpus(&small(20, 3), &v).unwrap();
    let b = gen_corpus(&small(20, 3), &v).unwrap();
    assert_eq!(a, b);
    let c = gen_corpus(&small(20, 4), &v).unwrap();
    assert_ne!(a, c);
}

#[test]
fn parallel_generation_matches_sequential() {
    let v = EventVocab::default();
    par::set_mode(par::ExecMode::Sequential);
    let a = gen_corpus(&small(16, 9), &v).unwrap();
    par::set_mode(par::ExecMode::Parallel);
    let b = gen_corpus(&small(16, 9), &v).unwrap();
    assert_eq!(a, b);
}

#[test]
fn durations_and_event_counts_in_range() {
    let v = EventVocab::default();
    let cfg = CorpusConfig {
        duration_range: (30, 60),
        ..small(50, 1)
    };
    let mut audio = 0;
    let mut total = 0;
    for vid in gen_corpus(&cfg, &v).unwrap() {
        assert!((30.0..=60.0).contains(&vid.duration));
        let n = vid.atomic_events.len();
        assert!((4..=10).contains(&n));
        for e in vid.visual_events.iter().chain(&vid.audio_events) {
            assert!(e.t >= 0.0 && e.t <= vid.duration);
        }
        audio += vid.audio_events.len();
        total += n;
    }
    let frac = audio as f64 / total as f64;
    assert!((0.35..0.65).contains(&frac), "audio fraction {frac}");
}

#[test]
fn gt_caption_round_trips() {
    let v = EventVocab::default();
    for vid in gen_corpus(&small(200, 11), &v).unwrap() {
        assert_eq!(parse_caption(&vid.caption, &v), (vid.event_ids(), 0));
    }
}

#[test]
fn render_and_parse_examples() {
    let v = EventVocab::default();
    let ev = |p: &str, t: f64| TimedEvent {
        id: v.id_of(p).unwrap().into(),
        phrase: p.into(),
        t,
    };
    assert_eq!(render_caption(&[ev("loud bell", 1.0)]), "loud bell.");
    assert_eq!(render_caption(&[ev("red star", 4.0), ev("loud bell", 1.0)]), "loud bell. red star.");
    let (ids, bad) = parse_caption("loud bell. gibberish here.", &v);
    assert_eq!(ids.into_iter().collect::<Vec<_>>(), vec![v.id_of("loud bell").unwrap()]);
    assert_eq!(bad, 1);
    assert_eq!(parse_caption("", &v), (BTreeSet::new(), 0));
    let set = caption_event_set("loud bell. nope. nope. #audio: soft drum.", &v);
    assert_eq!(set.len(), 4);
}

#[test]
fn local_captions_and_intervals() {
    let v = EventVocab::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for vid in gen_corpus(&small(60, 2), &v).unwrap() {
        let (a, b) = vid.sample_interval(&mut rng);
        assert!(a >= 0.0 && b <= vid.duration && a < b);
        let len = b - a;
        assert!(len >= (0.2 * vid.duration).ceil() - 1e-12 && len <= (0.6 * vid.duration).floor() + 1e-12);
        let ids = vid.local_event_ids(a, b).unwrap();
        assert!(!ids.is_empty());
        assert_eq!(parse_caption(&vid.local_caption(a, b).unwrap(), &v).0, ids);
    }
}

#[test]
fn media_shapes_and_activation() {
    let v = EventVocab::default();
    let cfg = ModelConfig::default();
    let vid = gen_corpus(&small(1, 7), &v).unwrap().remove(0);
    let m = vid.media(&cfg, 0.0).unwrap();
    let frames = m.frames.as_ref().unwrap();
    assert_eq!(frames.len(), vid.duration as usize);
    let audio = m.audio.as_ref().unwrap();
    assert_eq!(audio.len(), audio_segment_count(vid.duration, &cfg));
    for e in &vid.visual_events {
        let k = (e.t - 0.5) as usize;
        assert_eq!(frames.features.row(k), event_feature(&e.id, cfg.visual_input_dim).as_slice());
    }
    for e in &vid.audio_events {
        let k = (e.t - 0.5) as usize;
        let tps = cfg.audio_tokens_per_segment;
        let seg = &audio.segments[k / tps];
        assert_eq!(seg.row(k % tps), event_feature(&e.id, cfg.audio_input_dim).as_slice());
    }
    assert_eq!(vid.media(&cfg, 0.1).unwrap(), vid.media(&cfg, 0.1).unwrap());
}

#[test]
fn jsonl_round_trip() {
    let v = EventVocab::default();
    let corpus = gen_corpus(&small(5, 1), &v).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.jsonl");
    write_jsonl(&p, &corpus).unwrap();
    assert_eq!(read_jsonl(&p).unwrap(), corpus);
    let first = fs::read_to_string(&p).unwrap();
    let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    for k in ["id", "duration", "visual_events", "audio_events", "caption", "atomic_events"] {
        assert!(line.get(k).is_some(), "missing {k}");
    }
    fs::write(&p, "{\"id\": 1}\n").unwrap();
    assert!(matches!(read_jsonl(&p), Err(Error::Data(_))));
}

#[test]
fn bad_configs_rejected() {
    let v = EventVocab::default();
    assert!(gen_corpus(&small(0, 1), &v).is_err());
    let cfg = CorpusConfig {
        duration_range: (5, 2),
        ..small(1, 1)
    };
    assert!(gen_corpus(&cfg, &v).is_err());
}

proptest! {
    #[test]
    fn render_parse_round_trip(picks in proptest::collection::btree_set(0usize..48, 0..12), seed in any::<u64>()) {
        let v = EventVocab::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let events: Vec<TimedEvent> = picks
            .iter()
            .map(|&i| {
                let p = if i < 24 { &v.visual()[i] } else { &v.audio()[i - 24] };
                TimedEvent { id: v.id_of(p).unwrap().into(), phrase: p.clone(), t: rng.random_range(0.0..30.0) }
            })
            .collect();
        let ids: BTreeSet<String> = events.iter().map(|e| e.id.clone()).collect();
        prop_assert_eq!(parse_caption(&render_caption(&events), &v), (ids, 0));
    }
}

#[test]
fn prompts() {
    let v = EventVocab::default();
    let tok = Tokenizer::new(&v, 30).unwrap();
    assert_eq!(task_prompt(&tok, &Task::Global).unwrap().len(), 1);
    let p = task_prompt(&tok, &Task::Local { start: 2.0, end: 9.0 }).unwrap();
    assert_eq!(tok.decode(&p), "describe 2 9");
    assert!(task_prompt(&tok, &Task::Local { start: 2.5, end: 9.0 }).is_err());
    assert!(task_prompt(&tok, &Task::Local { start: 2.0, end: 31.0 }).is_err());
    assert_eq!(tok.decode(&count_prompt(&tok, true).unwrap()), "count sounds");
    let t = caption_target(&tok, "red star.").unwrap();
    assert_eq!(*t.last().unwrap(), tok.eos());
}
