use healthmap::fault_manager::{report_detection, ClassifierConfig, DetectionReport};
use healthmap::shm::{self, AppendBatch, DecodeError};
use healthmap::ResourceMap;
use hm_oracles::gen::{self, Shape};
use hm_oracles::{crc, layout};
use proptest::prelude::*;
use rand::Rng;

fn fixture() -> Vec<u8> {
    let mut rng = gen::rng(7);
    let map = gen::random_map(
        &mut rng,
        &Shape {
            max_modules: 20,
            ..Shape::default()
        },
    );
    shm::serialize(&map).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn round_trip_is_identity(seed in any::<u64>()) {
        let map = gen::random_map(&mut gen::rng(seed), &Shape::default());
        let image = shm::serialize(&map).unwrap();
        let back = shm::deserialize(&image).unwrap();
        prop_assert_eq!(&back, &map);
        prop_assert_eq!(shm::serialize(&back).unwrap(), image);
    }

    #[test]
    fn crc_matches_bitwise_reference(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
        prop_assert_eq!(shm::crc32(&bytes), crc::crc32(&bytes));
    }

    #[test]
    fn header_fields_follow_layout(seed in any::<u64>()) {
        let map = gen::random_map(&mut gen::rng(seed), &Shape::default());
        let image = shm::serialize(&map).unwrap();
        let c = layout::counts(&image);
        let n = map.counts();
        prop_assert_eq!(&image[0..4], b"SHM1");
        prop_assert_eq!(c.total, image.len());
        prop_assert_eq!(
            (c.modules, c.diag, c.deps, c.faults, c.detections),
            (n.modules, n.diag_resources, n.dependencies, n.faults, n.detections)
        );
        let body = u32::from_le_bytes(image[24..28].try_into().unwrap());
        let head = u32::from_le_bytes(image[28..32].try_into().unwrap());
        prop_assert_eq!(body, crc::crc32(&image[32..]));
        prop_assert_eq!(head, crc::crc32(&image[..28]));
    }

    #[test]
    fn resealed_mutations_never_panic(seed in any::<u64>(), flips in 1usize..6) {
        let mut rng = gen::rng(seed);
        let map = gen::random_map(&mut rng, &Shape { max_modules: 12, ..Shape::default() });
        let mut image = shm::serialize(&map).unwrap();
        for _ in 0..flips {
            let at = rng.gen_range(32..image.len().max(33)).min(image.len() - 1);
            image[at] = rng.gen();
        }
        shm::reseal(&mut image);
        if let Ok(decoded) = shm::deserialize(&image) {
            prop_assert!(decoded.validate().is_empty());
            let again = shm::serialize(&decoded).unwrap();
            prop_assert_eq!(shm::deserialize(&again).unwrap(), decoded);
        }
    }

    #[test]
    fn append_matches_full_serialization(seed in any::<u64>(), reports in 1usize..12) {
        let mut rng = gen::rng(seed);
        let shape = Shape { max_modules: 15, ..Shape::default() };
        let old = gen::random_map(&mut rng, &shape);
        let image = shm::serialize(&old).unwrap();
        let detectors: Vec<u32> = old.modules().iter()
            .flat_map(|m| m.diag_resources.iter().map(|d| d.id)).collect();
        let mut new = old.clone();
        let mut rm = ResourceMap::init(&new);
        let mut t = rng.gen_range(0..10_000_000u64);
        for _ in 0..reports {
            t += rng.gen_range(0..2_000_000);
            let r = DetectionReport {
                detector: detectors[rng.gen_range(0..detectors.len())],
                severity: gen::nonzero_severity(&mut rng),
                classification: rng.gen_range(0..4),
                timestamp: t,
                payload: rng.gen(),
            };
            report_detection(&mut new, &mut rm, &r, &ClassifierConfig::default()).unwrap();
        }
        let batch = AppendBatch::between(&old, &new).unwrap();
        let appended = shm::append_fault_data(&image, &batch).unwrap();
        prop_assert_eq!(shm::deserialize(&appended).unwrap(), new.clone());

        let allowed = layout::patchable_bytes(&image);
        for i in 32..image.len() {
            if image[i] != appended[i] {
                prop_assert!(allowed.contains(&i), "byte {} changed outside patch classes", i);
            }
        }
        let c = layout::counts(&appended);
        prop_assert_eq!(c.total, appended.len());
        prop_assert_eq!(c.detections, new.counts().detections);
    }
}

#[test]
fn every_single_byte_corruption_is_caught() {
    let image = fixture();
    for at in 0..image.len() {
        for mask in [0x01u8, 0x80, 0xFF] {
            let mut bad = image.clone();
            bad[at] ^= mask;
            assert!(shm::validate(&bad).is_err(), "corruption at {at} missed");
        }
    }
}

#[test]
fn truncation_and_extension_rejected() {
    let image = fixture();
    for len in 0..image.len() {
        assert!(shm::validate(&image[..len]).is_err());
    }
    let mut longer = image.clone();
    longer.push(0);
    assert!(matches!(
        shm::validate(&longer),
        Err(DecodeError::LengthMismatch { .. }) | Err(DecodeError::BodyCrcMismatch)
    ));
}

#[test]
fn compile_time_image_is_fault_free() {
    let xml = include_str!("../fixtures/table1.xml");
    let compiled = healthmap::compiler::compile_str(xml).unwrap();
    let c = layout::counts(&compiled.image);
    assert_eq!((c.faults, c.detections), (0, 0));
    assert_eq!(
        compiled.image.len(),
        layout::HEADER + 9 * layout::MODULE + 9 * layout::DIAG
    );
}
