mod common;

use proptest::prelude::*;

use common::*;
use stylegraft::backends::contract::{check_classifier, check_embedder, check_generator};
use stylegraft::backends::reference::{graft, ReferenceEmbedder, ReferenceGenerator};
use stylegraft::backends::{
    connect_classifier, connect_embedder, connect_generator, BackendError, ClassifierBackend,
    ClassifierCapabilities, ConnectOptions, Descriptor, EmbedderBackend, EmbedderCapabilities, GeneratorBackend,
    Modality,
};
use stylegraft::data::ImageRef;
use stylegraft::distribution::LabelDistribution;
use stylegraft::extractor::{AttentionProfile, HeadLayerId};
use stylegraft::retriever::EmbeddingVector;

fn probes() -> Vec<Vec<String>> {
    vec![
        words("a dog runs on the beach acting silly"),
        words("a girl sits sadly alone"),
        words("two lovers together forever"),
        words("x"),
        words("nothing in the lexicon at all"),
    ]
}

fn opts() -> ConnectOptions {
    ConnectOptions {
        labels: Some(labels()),
        base_dir: fixtures(),
        ..ConnectOptions::default()
    }
}

#[test]
fn reference_backends_honour_the_contract_in_both_precisions() {
    let d: Descriptor = "ref:classifier:lexicon=lexicon.json,heads=3,layers=2,head=2,layer=1,seed=4".parse().unwrap();
    let c64 = connect_classifier::<f64>(&d, &opts()).unwrap();
    let c32 = connect_classifier::<f32>(&d, &opts()).unwrap();
    assert!(check_classifier(c64.as_ref(), &probes()).passed());
    assert!(check_classifier(c32.as_ref(), &probes()).passed());
    assert_eq!(c64.capabilities().head_count, 3);

    let images = [ImageRef::new("a", "tags:dog,beach"), ImageRef::new("b", "photos/cat.jpg")];
    let e: Descriptor = "ref:embedder:dim=32,seed=2".parse().unwrap();
    let e64 = connect_embedder::<f64>(&e, &opts()).unwrap();
    let e32 = connect_embedder::<f32>(&e, &opts()).unwrap();
    let r = check_embedder(e64.as_ref(), &probes(), &images);
    assert!(r.passed() && r.checked > 0, "{:?}", r.violations);
    assert!(check_embedder(e32.as_ref(), &probes(), &images).passed());

    let g = connect_generator(&"ref:generator".parse().unwrap(), &opts()).unwrap();
    let prompts = vec![(words("so silly"), words("a dog runs")), (words("x"), words("y"))];
    assert!(check_generator(g.as_ref(), &prompts).passed());
}

/// Returns a profile that ignores the caption length.
struct Misshapen(ClassifierCapabilities);

impl ClassifierBackend<f64> for Misshapen {
    fn capabilities(&self) -> &ClassifierCapabilities {
        &self.0
    }
    fn classify(&self, _: &[String]) -> Result<LabelDistribution<f64>, BackendError> {
        Ok(LabelDistribution::from_scores(&self.0.labels, &[1.0, 1.0]).unwrap())
    }
    fn attention(&self, _: &[String]) -> Result<AttentionProfile<f64>, BackendError> {
        Ok(AttentionProfile::normalized(1, 1, 3, vec![1.0, 1.0, 1.0]).unwrap())
    }
}

/// Ignores its declared dimension.
struct Narrow(EmbedderCapabilities);

impl EmbedderBackend<f64> for Narrow {
    fn capabilities(&self) -> &EmbedderCapabilities {
        &self.0
    }
    fn embed_text(&self, _: &[String]) -> Result<EmbeddingVector<f64>, BackendError> {
        Ok(EmbeddingVector::new(vec![1.0, 1.0]).unwrap())
    }
    fn embed_image(&self, _: &ImageRef) -> Result<EmbeddingVector<f64>, BackendError> {
        Err(BackendError::Remote { code: -32000, message: "no images".into() })
    }
}

#[test]
fn the_contract_catches_misbehaving_backends() {
    let c = Misshapen(ClassifierCapabilities {
        labels: vec!["a".into(), "b".into()],
        head_count: 1,
        layer_count: 1,
    });
    let r = check_classifier(&c, &[words("one two")]);
    assert!(!r.passed());
    assert!(r.violations.iter().any(|v| v.contains("shape")), "{:?}", r.violations);

    let e = Narrow(EmbedderCapabilities {
        dimension: 4,
        modalities: vec![Modality::Text],
    });
    let r = check_embedder(&e, &[words("hi")], &[ImageRef::new("i", "tags:x")]);
    assert_eq!(r.violations.len(), 2, "{:?}", r.violations);
}

#[test]
fn connect_checks_labels_and_dimension_up_front() {
    let c: Descriptor = "ref:classifier:lexicon=lexicon.json".parse().unwrap();
    let other = ConnectOptions {
        labels: Some(stylegraft::data::LabelSet::parse("humor,negative,positive", None).unwrap()),
        ..opts()
    };
    assert!(matches!(connect_classifier::<f64>(&c, &other), Err(BackendError::Capability(_))));
    let focus_out_of_range: Descriptor = "ref:classifier:lexicon=lexicon.json,heads=2,head=2".parse().unwrap();
    assert!(connect_classifier::<f64>(&focus_out_of_range, &opts()).is_err());
    let missing: Descriptor = "ref:classifier:lexicon=nope.json".parse().unwrap();
    assert!(connect_classifier::<f64>(&missing, &opts()).is_err());

    let e: Descriptor = "ref:embedder:dim=16".parse().unwrap();
    let want_32 = ConnectOptions {
        dimension: Some(32),
        ..opts()
    };
    assert!(matches!(connect_embedder::<f64>(&e, &want_32), Err(BackendError::Capability(_))));

    // Each connector accepts only its own kind.
    assert!(connect_embedder::<f64>(&c, &opts()).is_err());
    assert!(connect_generator(&e, &opts()).is_err());
}

#[test]
fn malformed_descriptors_are_descriptor_errors() {
    for bad in [
        "",
        "ref:",
        "ref:oracle",
        "ref:classifier",
        "ref:classifier:lexicon=x,colour=blue",
        "ref:embedder:dim=many",
        "ref:embedder:dim",
        "ref:generator:seed=1",
        "tcp:localhost",
        "tcp::80",
        "tcp:host:99999",
        "proc:",
        "proc:'unterminated",
        "http://example.com",
    ] {
        assert!(matches!(bad.parse::<Descriptor>(), Err(BackendError::Descriptor(_))), "{bad:?}");
    }
}

fn descriptor_strategy() -> impl Strategy<Value = String> {
    prop_oneof![
        (1usize..5, 1usize..5, 0usize..4, 0usize..4, any::<u32>()).prop_map(|(h, l, fh, fl, s)| format!(
            "ref:classifier:lexicon=dir/lex.json,heads={h},layers={l},head={fh},layer={fl},seed={s}"
        )),
        (2usize..2000, any::<u64>()).prop_map(|(d, s)| format!("ref:embedder:dim={d},seed={s}")),
        Just("ref:generator".to_string()),
        (1u16..u16::MAX).prop_map(|p| format!("tcp:127.0.0.1:{p}")),
        prop::collection::vec("[a-z/ .'-]{1,8}", 1..4).prop_map(|argv| {
            format!("proc:{}", shell_words::join(argv))
        }),
    ]
}

proptest! {
    #[test]
    fn descriptors_display_as_they_parse(s in descriptor_strategy()) {
        let d: Descriptor = s.parse().unwrap();
        let again: Descriptor = d.to_string().parse().unwrap();
        prop_assert_eq!(again, d);
    }

    #[test]
    fn grafting_keeps_every_word(
        phrase in prop::collection::vec("[a-e]", 1..4),
        content in prop::collection::vec("[a-e]", 1..8),
    ) {
        let out = graft(&phrase, &content);
        prop_assert_eq!(out.len(), phrase.len() + content.len() - usize::from(content.contains(phrase.last().unwrap())));
        let mut want: Vec<&String> = phrase.iter().chain(&content).collect();
        let mut got: Vec<&String> = out.iter().collect();
        if content.contains(phrase.last().unwrap()) {
            let anchor = phrase.last().unwrap();
            let i = want.iter().rposition(|w| *w == anchor).unwrap();
            want.remove(i);
        }
        want.sort();
        got.sort();
        prop_assert_eq!(got, want);
        // The phrase appears intact.
        prop_assert!(out.windows(phrase.len()).any(|w| w == &phrase[..]));
    }

    #[test]
    fn reference_classifier_prefers_the_lexicon_label(style in 0usize..4, pick in 0usize..6, seed in any::<u64>()) {
        let c = reference_classifier(HeadLayerId::new(1, 2), seed);
        let lex = lexicon();
        let label: stylegraft::data::StyleLabel = STYLES[style].into();
        let word = lex.words(&label).unwrap().iter().nth(pick).unwrap().clone();
        let tokens = vec!["a".to_string(), "dog".to_string(), word];
        let d: LabelDistribution<f64> = c.classify(&tokens).unwrap();
        prop_assert_eq!(d.argmax(), &label);
        let p: AttentionProfile<f64> = c.attention(&tokens).unwrap();
        let row = p.row(HeadLayerId::new(1, 2)).unwrap();
        prop_assert!(row[2] > row[0] && row[2] > row[1]);
    }
}

#[test]
fn embedder_similarity_tracks_word_overlap() {
    let e = ReferenceEmbedder::new(768, 7).unwrap();
    let v = |s: &str| -> EmbeddingVector<f64> { e.embed_text(&words(s)).unwrap() };
    let base = v("a dog runs on the beach");
    let near = v("a dog runs on the sand");
    let far = v("two lovers kiss under stars");
    let dot = |a: &EmbeddingVector<f64>, b: &EmbeddingVector<f64>| -> f64 {
        a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
    };
    assert!(dot(&base, &near) > 0.6);
    assert!(dot(&base, &far).abs() < 0.2);
    let g = ReferenceGenerator::default();
    assert!(g.capabilities().deterministic);
}
