use relia_core::dataset::{make_synthetic_task_with, SyntheticSpec};
use relia_core::dsp::{log_mel, DspConfig};
use relia_core::parallel;
use proptest::prelude::*;

#[test]
fn parallel_and_sequential_featurization_agree() {
    let spec = SyntheticSpec {
        sample_rate: 4000,
        seconds: 0.5,
        ..SyntheticSpec::default()
    };
    let dsp = DspConfig {
        sample_rate: 4000,
        window_len: 256,
        hop_len: 128,
        n_mels: 8,
        clip_seconds: 0.5,
        fmin: 50.0,
        fmax: 2000.0,
    };
    let examples = make_synthetic_task_with(&spec, 5, 7, -3.0, 9).unwrap();
    let seq = parallel::map_sequential(&examples, |_, e| log_mel(&e.clip, &dsp).unwrap());
    let par = parallel::map(&examples, |_, e| log_mel(&e.clip, &dsp).unwrap());
    assert_eq!(seq, par);
}

proptest! {
    #[test]
    fn map_preserves_order(items in prop::collection::vec(any::<i64>(), 0..200)) {
        let f = |i: usize, x: &i64| x.wrapping_mul(31).wrapping_add(i as i64);
        prop_assert_eq!(parallel::map(&items, f), parallel::map_sequential(&items, f));
    }

    #[test]
    fn try_map_reports_first_error_in_order(items in prop::collection::vec(0u8..10, 1..100)) {
        let r = parallel::try_map(&items, |i, &x| if x == 0 { Err(i) } else { Ok(x) });
        match items.iter().position(|&x| x == 0) {
            Some(first) => prop_assert_eq!(r, Err(first)),
            None => prop_assert_eq!(r, Ok(items.clone())),
        }
    }
}
