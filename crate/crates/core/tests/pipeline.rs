mod common;

use cetp::corpus::Split;
use cetp::pipeline::*;
use cetp::realizer::{Action, GeneratedSentence, Source};

/// The reference sentence replayed as a generation, copying its mentions.
fn replay(f: &common::Fixture, review: usize) -> Vec<GeneratedSentence> {
    let vocab = &f.sc.corpus.vocab;
    f.sc.corpus.reviews[review]
        .sentences
        .iter()
        .map(|s| {
            let (mut actions, mut tags) = (Vec::new(), Vec::new());
            let mut t = 0;
            while t < s.words.len() {
                match s.mentions.iter().find(|m| m.start == t && m.copyable) {
                    Some(m) => {
                        actions.push(Action::Copy(m.node));
                        tags.extend(std::iter::repeat(Source::Copy).take(m.end - m.start));
                        t = m.end;
                    }
                    None => {
                        actions.push(Action::Gen(vocab.id(&s.words[t])));
                        tags.push(Source::Gen);
                        t += 1;
                    }
                }
            }
            GeneratedSentence {
                actions,
                words: s.words.clone(),
                tags,
                score: 0.0,
            }
        })
        .collect()
}

#[test]
fn references_score_perfectly_against_themselves() {
    let f = common::fixture();
    let model = f.model(1);
    let outputs: Vec<Generated> = f
        .examples
        .iter()
        .map(|ex| Generated {
            example: ex,
            plan: ex.plan.clone(),
            sentences: replay(&f, ex.review),
        })
        .collect();
    for mode in [EcrAnnotation::CopyTags, EcrAnnotation::SurfaceMatch] {
        let r = evaluate(&f.sc.corpus, &model, &outputs, mode, 13).unwrap();
        assert!((r.bleu4 - 100.0).abs() < 1e-9);
        assert!((r.rouge_l - 1.0).abs() < 1e-12);
        assert_eq!(r.ecr, Some(100.0));
        assert_eq!((r.schema_mae, r.schema_rmse), (0.0, 0.0));
        assert_eq!(r.rows().len(), 9);
    }
    assert!(evaluate(&f.sc.corpus, &model, &[], EcrAnnotation::CopyTags, 13).is_err());
}

#[test]
fn generated_reviews_follow_their_plans() {
    let f = common::fixture();
    let model = f.model(2);
    let train = select(&f.examples, &f.sc.corpus, Split::Train);
    assert!(!train.is_empty());
    for ex in train.iter().take(3) {
        let plan = generate_plan(&model, &f.cidx, &f.schemas, ex).unwrap();
        assert!(plan.is_complete());
        let (again, sentences) = generate_review(&model, &f.cidx, &f.schemas, &f.sc.corpus, ex, 1).unwrap();
        assert_eq!(again, plan);
        assert_eq!(sentences.len(), plan.steps.len() - 1);
    }
}
