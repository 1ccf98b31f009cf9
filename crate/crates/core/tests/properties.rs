use std::collections::BTreeMap;

use proptest::prelude::*;

use hallu_probe::dataset::balance::{oversample, BalanceError, BalanceTargets, FieldValue, Stratum};
use hallu_probe::dataset::split::{partition_sizes, split_questions, Ratios};
use hallu_probe::labeler::{map_booleans, JudgeVerdict, Label};
use hallu_probe::probe::{early_stop, EpochRunner};
use hallu_probe::prompts::{ChunkCount, ChunkSize, TemplateId};

fn stratum() -> impl Strategy<Value = Stratum> {
    (any::<bool>(), 0u8..2, 0usize..3, 0usize..3, 0usize..3).prop_map(|(a, l, t, z, c)| Stratum {
        answerable: Some(a),
        label: l,
        template_id: Some(TemplateId::ALL[t]),
        chunk_size: Some(ChunkSize::ALL[z]),
        chunks_per_prompt: Some(ChunkCount::ALL[c]),
    })
}

fn count(strata: &[Stratum], mult: &[usize], f: impl Fn(&Stratum) -> bool) -> usize {
    strata.iter().zip(mult).filter(|(s, _)| f(s)).map(|(_, m)| m).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn oversampling_balances_or_reports(strata in prop::collection::vec(stratum(), 1..300), seed in any::<u64>()) {
        match oversample(&strata, &BalanceTargets::full(), seed) {
            Ok(mult) => {
                prop_assert_eq!(mult.len(), strata.len());
                prop_assert!(mult.iter().all(|&m| m >= 1));
                let n: usize = mult.iter().sum();
                prop_assert_eq!(2 * count(&strata, &mult, |s| s.label == 1), n);
                prop_assert_eq!(2 * count(&strata, &mult, |s| s.answerable == Some(true)), n);
                for k in 0..3 {
                    for c in [
                        count(&strata, &mult, |s| s.template_id == Some(TemplateId::ALL[k])),
                        count(&strata, &mult, |s| s.chunk_size == Some(ChunkSize::ALL[k])),
                        count(&strata, &mult, |s| s.chunks_per_prompt == Some(ChunkCount::ALL[k])),
                    ] {
                        prop_assert!((3 * c).abs_diff(n) <= 3, "{c} of {n}");
                    }
                }
                prop_assert_eq!(oversample(&strata, &BalanceTargets::full(), seed).unwrap(), mult);
            }
            Err(BalanceError::EmptyCell { .. } | BalanceError::MissingValue(_) | BalanceError::NotReached(_)) => {}
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn withheld_value_is_never_targeted(strata in prop::collection::vec(stratum(), 1..200), t in 0usize..3, seed in any::<u64>()) {
        let withheld = TemplateId::ALL[t];
        let kept: Vec<Stratum> = strata.into_iter().filter(|s| s.template_id != Some(withheld)).collect();
        let targets = BalanceTargets::full().without(FieldValue::Template(withheld));
        if let Ok(mult) = oversample(&kept, &targets, seed) {
            let n: usize = mult.iter().sum();
            for other in TemplateId::ALL.into_iter().filter(|&x| x != withheld) {
                let c = count(&kept, &mult, |s| s.template_id == Some(other));
                prop_assert!((2 * c).abs_diff(n) <= 2, "{c} of {n}");
            }
        }
    }

    #[test]
    fn questions_land_in_exactly_one_split(n in 3usize..400, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("q{i}")).collect();
        let ratios = Ratios::default();
        let split = split_questions(ids.iter().map(String::as_str), &ratios, seed).unwrap();
        prop_assert_eq!(split.len(), n);
        let mut sizes: BTreeMap<_, usize> = BTreeMap::new();
        for s in split.values() {
            *sizes.entry(*s).or_default() += 1;
        }
        let want = partition_sizes(n, &ratios);
        prop_assert_eq!(sizes.values().sum::<usize>(), want.iter().sum::<usize>());
        prop_assert_eq!(split_questions(ids.iter().map(String::as_str), &ratios, seed).unwrap(), split);
    }

    #[test]
    fn partition_sizes_sum_to_n(n in 0usize..10_000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (a, b) = if a + b > 1.0 { (a / 2.0, b / 2.0) } else { (a, b) };
        let ratios = Ratios([a, b, 1.0 - a - b]);
        prop_assume!(ratios.validate().is_ok());
        let sizes = partition_sizes(n, &ratios);
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        for (s, r) in sizes.iter().zip(ratios.0) {
            prop_assert!((*s as f64) >= (n as f64) * r - 1.0 - 1e-6);
        }
    }

    #[test]
    fn hallucinated_iff_some_row_says_so(answerable in any::<bool>(), bits in any::<[bool; 4]>()) {
        let [c, g, f, idk] = bits;
        let label = map_booleans(answerable, &JudgeVerdict::new(c, g, f, idk));
        if c && !(g && f && idk) {
            prop_assert_eq!(label, Label::Hallucinated);
        }
        if g && f && idk {
            prop_assert_eq!(label, Label::Invalid);
        }
        if !c && !f && !idk {
            prop_assert_eq!(label, Label::Grounded);
        }
    }

    #[test]
    fn early_stop_stops_after_patience(
        losses in prop::collection::vec(0.0f64..10.0, 1..120),
        patience in 1usize..30,
    ) {
        struct Replay(Vec<f64>, usize);
        impl EpochRunner for Replay {
            type Checkpoint = usize;
            fn run_epoch(&mut self, epoch: usize) -> f64 {
                self.1 = epoch;
                self.0[epoch - 1]
            }
            fn snapshot(&self) -> usize {
                self.1
            }
        }
        let max = losses.len();
        let out = early_stop(&mut Replay(losses.clone(), 0), max, patience).unwrap();
        let seen = &losses[..out.stop_epoch];
        let min = seen.iter().copied().fold(f64::INFINITY, f64::min);
        let first_min = seen.iter().position(|&l| l == min).unwrap() + 1;
        prop_assert_eq!(out.best_epoch, first_min);
        prop_assert_eq!(out.checkpoint, first_min);
        prop_assert_eq!(out.best_val_loss, min);
        prop_assert!(out.stop_epoch == max || out.stop_epoch == out.best_epoch + patience);
        prop_assert_eq!(out.val_losses.as_slice(), seen);
    }
}
