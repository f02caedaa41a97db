use geoflow::data::{read_dataset, write_dataset, DatasetRecord};
use geoflow::gen::Formulation;
use geoflow::metrics::{generative_metrics, geoscore};
use geoflow::net::{read_checkpoint, write_checkpoint, Checkpoint, ModelParams, ModelTag, NetConfig};
use geoflow::sched::{Scheduler, SchedulerKind};
use geoflow::sphere::{latlon_to_unit, LatLon, UnitVec3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn points(raw: &[(f64, f64)]) -> Vec<UnitVec3> {
    raw.iter()
        .map(|&(lat, lon)| latlon_to_unit(LatLon::new(lat, lon).unwrap()).unwrap())
        .collect()
}

fn latlon() -> impl Strategy<Value = (f64, f64)> {
    (-90.0f64..=90.0, -180.0f64..180.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_is_monotone(alpha in -6.0f64..0.0, beta in 1.0f64..10.0, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let s = Scheduler::new(SchedulerKind::SkewedSigmoid, alpha, beta).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (klo, khi) = (s.kappa(lo).unwrap(), s.kappa(hi).unwrap());
        prop_assert!((0.0..=1.0).contains(&klo) && (0.0..=1.0).contains(&khi));
        prop_assert!(klo <= khi + 1e-12);
        prop_assert!(s.kappa_dot(lo).unwrap() >= 0.0);
    }

    #[test]
    fn checkpoint_round_trip(half in 1usize..5, blocks in 1usize..3, cond in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::init(NetConfig::new(2 * half, blocks, cond), &mut rng).unwrap();
        params.randomize(0.3, &mut rng);
        let ck = Checkpoint {
            tag: ModelTag { formulation: Some(Formulation::RfmS2), sched: Scheduler::skewed() },
            ema: params.zeros_like(),
            params,
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ck).unwrap();
        // stored as f32: values round once, then the bytes are a fixed point
        let back = read_checkpoint(buf.as_slice()).unwrap();
        prop_assert_eq!(back.tag, ck.tag);
        for (a, b) in ck.params.tensors().iter().zip(back.params.tensors()) {
            for (x, y) in a.iter().zip(b) {
                prop_assert!((x - y).abs() <= 1e-7 * x.abs().max(1e-30));
            }
        }
        let mut again = Vec::new();
        write_checkpoint(&mut again, &back).unwrap();
        prop_assert_eq!(again, buf);
    }

    #[test]
    fn csv_dataset_round_trip(rows in prop::collection::vec((latlon(), prop::collection::vec(-1e3f64..1e3, 3)), 1..20)) {
        let records: Vec<DatasetRecord> = rows
            .into_iter()
            .map(|((lat_deg, lon_deg), cond)| DatasetRecord { lat_deg, lon_deg, cond })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_dataset(&path, &records).unwrap();
        prop_assert_eq!(read_dataset(&path).unwrap(), records);
    }

    #[test]
    fn generative_metrics_are_bounded(
        xs in prop::collection::vec(latlon(), 5..40),
        ys in prop::collection::vec(latlon(), 5..40),
        k in 1usize..4,
    ) {
        let (xs, ys) = (points(&xs), points(&ys));
        let m = generative_metrics(&xs, &ys, k).unwrap();
        for v in [m.precision, m.recall, m.coverage] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.density >= 0.0 && m.density <= xs.len().max(ys.len()) as f64);
        let same = generative_metrics(&xs, &xs, k).unwrap();
        prop_assert_eq!((same.precision, same.recall, same.coverage), (1.0, 1.0, 1.0));
    }

    #[test]
    fn geoscore_decreases_with_distance(a in 0.0f64..20_000.0, b in 0.0f64..20_000.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (glo, ghi) = (geoscore(lo).unwrap(), geoscore(hi).unwrap());
        prop_assert!(ghi <= glo && glo <= 5000.0 && ghi > 0.0);
    }
}
