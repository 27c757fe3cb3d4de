mod common;

use priming::finetune::FineTuneSetting;
use priming::harness::Experiment;
use priming::model::count_trainable_fraction;
use priming::params::Partition;

#[test]
fn every_setting_trains_exactly_its_partitions() {
    let mut exp = Experiment::new(common::tiny_config()).unwrap();
    for setting in FineTuneSetting::ALL {
        let init = exp.initial_model(setting, "tgt_a", 0).unwrap();
        assert_eq!(init.has_adapter(), setting.has_adapter(), "{setting}");
        assert_eq!(init.head_tasks(), ["tgt_a"]);

        let (out, report) = exp.finetune_and_test(setting, &init, "tgt_a", 0).unwrap();
        let trainable = setting.trainable_partitions();
        for p in Partition::ALL {
            if !trainable.contains(&p) {
                assert!(
                    out.model.registry().partition_bit_eq(init.registry(), p),
                    "{setting} changed frozen {p:?}"
                );
            }
        }
        if out.best_step > 0 {
            for &p in &trainable {
                if init.registry().count(p) > 0 {
                    assert!(out.model.registry().max_abs_diff(init.registry(), p) > 0.0, "{setting} left {p:?} alone");
                }
            }
        }

        let analytic = count_trainable_fraction(init.config(), setting);
        assert_eq!(report.trainable_fraction, analytic, "{setting}");
        let counted: u64 = trainable.iter().map(|&p| init.registry().count(p)).sum();
        assert_eq!(analytic.trainable, counted, "{setting}");
        assert_eq!(analytic.total, init.registry().total_count(), "{setting}");
        assert_eq!(report.trainable_percent, analytic.display_percent());
        assert!((0.0..=100.0).contains(&report.f1));
    }
}

#[test]
fn pe_settings_share_one_fraction_and_full_settings_are_total() {
    let cfg = common::tiny_config().model;
    let at = count_trainable_fraction(&cfg, FineTuneSetting::AdapterTuning);
    for s in FineTuneSetting::ALL {
        let f = count_trainable_fraction(&cfg, s);
        if s.has_adapter() && !s.is_full() {
            assert_eq!(f, at, "{s}");
        }
        if s.is_full() {
            assert_eq!(f.trainable, f.total, "{s}");
            assert_eq!(f.display_percent(), "100%");
        }
    }
}

#[test]
fn adapter_tuning_and_priming_start_from_the_same_adapter() {
    let mut exp = Experiment::new(common::tiny_config()).unwrap();
    let at = exp.initial_model(FineTuneSetting::AdapterTuning, "tgt_a", 3).unwrap();
    let start = exp.priming_start(3).unwrap();
    assert!(at.registry().partition_bit_eq(start.registry(), Partition::Lightweight));
    assert!(at.registry().partition_bit_eq(start.registry(), Partition::Pretrained));
    let other = exp.priming_start(4).unwrap();
    assert!(!other.registry().partition_bit_eq(start.registry(), Partition::Lightweight));
}
