use healthmap::shm::{self, EncodeError};
use healthmap::{Dependency, FaultDetection, HealthMap, Module, Persistence, Severity, Violation};
use hm_oracles::gen::{self, Shape};
use proptest::prelude::*;
use rand::Rng;

fn modules(seed: u64) -> (rand::rngs::StdRng, Vec<Module>) {
    let mut rng = gen::rng(seed);
    let map = gen::random_map(
        &mut rng,
        &Shape {
            max_modules: 10,
            ..Shape::default()
        },
    );
    (rng, map.into_modules())
}

fn broken(modules: Vec<Module>, expect: impl Fn(&Violation) -> bool) -> Result<(), TestCaseError> {
    let map = HealthMap::from_modules_unchecked(modules);
    let v = map.validate();
    prop_assert!(v.iter().any(expect), "violations: {:?}", v);
    prop_assert!(matches!(
        shm::serialize(&map),
        Err(EncodeError::StructureInvalid(_))
    ));
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn generated_maps_are_valid(seed in any::<u64>()) {
        let map = gen::random_map(&mut gen::rng(seed), &Shape::default());
        prop_assert!(map.validate().is_empty());
    }

    #[test]
    fn duplicate_module_id(seed in any::<u64>()) {
        let (mut rng, mut ms) = modules(seed);
        let mut copy = Module::new(ms[0].id, None, Severity::Low);
        copy.diag_resources.clear();
        let at = rng.gen_range(0..=ms.len());
        ms.insert(at, copy);
        broken(ms, |v| matches!(v, Violation::DuplicateModuleId(_)))?;
    }

    #[test]
    fn dangling_parent(seed in any::<u64>()) {
        let (mut rng, mut ms) = modules(seed);
        let i = rng.gen_range(0..ms.len());
        let ghost = (0..).find(|id| ms.iter().all(|m| m.id != *id)).unwrap();
        ms[i].parent = Some(ghost);
        broken(ms, |v| matches!(v, Violation::UnknownParent { .. }))?;
    }

    #[test]
    fn parent_cycle(seed in any::<u64>()) {
        let (_, mut ms) = modules(seed);
        let first = ms[0].id;
        ms[0].parent = Some(first);
        broken(ms, |v| matches!(v, Violation::ParentCycle(_)))?;
    }

    #[test]
    fn dangling_dependency(seed in any::<u64>()) {
        let (mut rng, mut ms) = modules(seed);
        let i = rng.gen_range(0..ms.len());
        let ghost = (0..).find(|id| ms.iter().all(|m| m.id != *id)).unwrap();
        ms[i].dependencies.push(Dependency { dependent: ghost, severity: Severity::Low });
        broken(ms, |v| matches!(v, Violation::UnknownDependent { .. }))?;
    }

    #[test]
    fn self_dependency(seed in any::<u64>()) {
        let (mut rng, mut ms) = modules(seed);
        let i = rng.gen_range(0..ms.len());
        let id = ms[i].id;
        ms[i].dependencies.push(Dependency { dependent: id, severity: Severity::High });
        broken(ms, |v| matches!(v, Violation::SelfDependency(_)))?;
    }

    #[test]
    fn bad_fault_records(seed in any::<u64>(), which in 0u8..4) {
        let (mut rng, mut ms) = modules(seed);
        let i = rng.gen_range(0..ms.len());
        let det = ms[i].diag_resources[0].id;
        let mut fault = healthmap::Fault {
            severity: Severity::Low,
            persistence: Persistence::Transient,
            classification: 0,
            detections: vec![FaultDetection::new(det, 0, 0)],
        };
        match which {
            0 => fault.severity = Severity::Zero,
            1 => fault.persistence = Persistence::Zero,
            2 => fault.detections[0].counter = 0,
            _ => fault.detections[0].detector = u32::MAX - 7,
        }
        ms[i].faults.push(fault);
        broken(ms, |v| match which {
            0 => matches!(v, Violation::ZeroSeverityFault(_)),
            1 => matches!(v, Violation::ZeroPersistenceFault(_)),
            2 => matches!(v, Violation::BadCounter { .. }),
            _ => matches!(v, Violation::UnknownDetector { .. }),
        })?;
    }
}
