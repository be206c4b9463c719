use std::path::PathBuf;

use proptest::prelude::*;
use raicl::promptkit::{build_transcript, ContentPart, Role};
use raicl::{LabelSet, PromptTemplate, Sample};

const LABELS: [&str; 4] = ["Alpha", "Bravo", "Charlie", "Delta"];
const WORDS: [&str; 6] = ["opacity", "clear", "enlarged", "lobe", "mild", "stable"];

fn sample_strategy() -> impl Strategy<Value = Sample> {
    (
        "[a-z]{6}",
        1usize..4,
        prop::collection::vec(prop::sample::select(WORDS.to_vec()), 1..6),
        prop::sample::select(LABELS.to_vec()),
    )
        .prop_map(|(id, images, words, label)| Sample {
            image_refs: (0..images)
                .map(|i| PathBuf::from(format!("{id}/{i}.png")))
                .collect(),
            text: words.join(" "),
            labels: vec![label.to_owned()],
            id,
        })
}

fn case() -> impl Strategy<Value = (Sample, Vec<Sample>, bool)> {
    (
        sample_strategy(),
        prop::collection::vec(sample_strategy(), 0..=10),
        any::<bool>(),
    )
}

fn template(with_system: bool) -> PromptTemplate {
    let mut t = PromptTemplate::default();
    if !with_system {
        t.system_instruction.clear();
    }
    t
}

fn labels() -> LabelSet {
    LabelSet::new(LABELS).unwrap()
}

proptest! {
    #[test]
    fn shape_and_alternation((query, demos, with_system) in case()) {
        let refs: Vec<&Sample> = demos.iter().collect();
        let t = build_transcript(&query, &refs, &template(with_system), &labels()).unwrap();
        let k = demos.len();
        prop_assert_eq!(t.messages.len(), 2 * k + 1 + usize::from(with_system));
        prop_assert!(t.check_shape().is_ok());
        let body = if with_system {
            prop_assert_eq!(t.messages[0].role, Role::System);
            &t.messages[1..]
        } else {
            &t.messages[..]
        };
        for (i, m) in body.iter().enumerate() {
            prop_assert_eq!(m.role, if i % 2 == 0 { Role::User } else { Role::Assistant });
        }
        // user turns carry every image, in order, then one text part
        let users: Vec<_> = body.iter().step_by(2).collect();
        for (m, s) in users.iter().zip(demos.iter().chain([&query])) {
            let images: Vec<&PathBuf> = m.parts.iter().filter_map(|p| match p {
                ContentPart::Image { image_ref } => Some(image_ref),
                _ => None,
            }).collect();
            prop_assert_eq!(images, s.image_refs.iter().collect::<Vec<_>>());
            prop_assert!(m.parts.last().unwrap().as_text().unwrap().contains(&s.text));
        }
    }

    #[test]
    fn demo_labels_verbatim_in_order((query, demos, with_system) in case()) {
        let refs: Vec<&Sample> = demos.iter().collect();
        let t = build_transcript(&query, &refs, &template(with_system), &labels()).unwrap();
        let expected: Vec<&str> = demos.iter().map(|d| d.labels[0].as_str()).collect();
        prop_assert_eq!(t.demo_labels(), expected);
    }

    #[test]
    fn query_label_never_read((query, demos, with_system) in case(), other in prop::sample::select(LABELS.to_vec())) {
        let refs: Vec<&Sample> = demos.iter().collect();
        let a = build_transcript(&query, &refs, &template(with_system), &labels()).unwrap();
        let mut relabeled = query.clone();
        relabeled.labels = vec![other.to_owned()];
        let b = build_transcript(&relabeled, &refs, &template(with_system), &labels()).unwrap();
        prop_assert_eq!(a.to_json(), b.to_json());
        let mut unlabeled = query.clone();
        unlabeled.labels.clear();
        let c = build_transcript(&unlabeled, &refs, &template(with_system), &labels()).unwrap();
        prop_assert_eq!(a.to_json(), c.to_json());
    }

    #[test]
    fn no_leak_when_demos_disagree((query, demos, _) in case()) {
        let gold = query.labels[0].clone();
        let demos: Vec<Sample> = demos.into_iter().filter(|d| d.labels[0] != gold).collect();
        let refs: Vec<&Sample> = demos.iter().collect();
        let t = build_transcript(&query, &refs, &template(false), &labels()).unwrap();
        prop_assert!(!t.to_json().contains(&gold));
    }

    #[test]
    fn pure((query, demos, with_system) in case()) {
        let refs: Vec<&Sample> = demos.iter().collect();
        let a = build_transcript(&query, &refs, &template(with_system), &labels()).unwrap();
        let b = build_transcript(&query, &refs, &template(with_system), &labels()).unwrap();
        prop_assert_eq!(a.to_json(), b.to_json());
    }
}
