use std::sync::Arc;

use hilbench::geometry::Vec2;
use hilbench::spatial::{ReferencePath, TrajectorySample};
use hilbench::sut::*;
use hilbench::timebase::TimestampNs;
use proptest::prelude::*;

fn observation(route: Arc<ReferencePath>, pos: Vec2, heading: f64, speed: f64) -> Observation {
    Observation {
        t: TimestampNs(0),
        ego_pose: TrajectorySample::new(TimestampNs(0), pos, heading),
        ego_speed: speed,
        detections: vec![],
        route,
        goal_speed: 0.5,
    }
}

#[test]
fn sut_source_stays_black_box() {
    let src = include_str!("../src/sut.rs");
    for forbidden in ["crate::plant", "crate::links", "crate::orchestrator", "crate::temporal"] {
        assert!(!src.contains(forbidden), "sut module must not reach into {forbidden}");
    }
}

#[test]
fn new_route_takes_effect_after_reset() {
    let mut pp = PurePursuit::new(PurePursuitParams::default()).unwrap();
    let east = Arc::new(ReferencePath::new(vec![Vec2::new(0.0, 0.0), Vec2::new(5.0, 0.0)], false).unwrap());
    let north = Arc::new(ReferencePath::new(vec![Vec2::new(0.0, 0.0), Vec2::new(0.0, 5.0)], false).unwrap());
    pp.reset(east.clone(), 1).unwrap();
    let a = pp.compute(&observation(east, Vec2::new(0.5, 0.0), 0.0, 0.3)).unwrap();
    pp.reset(north.clone(), 1).unwrap();
    let b = pp.compute(&observation(north, Vec2::new(0.0, 0.5), 0.0, 0.3)).unwrap();
    assert!(a.steer.abs() < 1e-12);
    assert!(b.steer > 0.1, "facing east on a northbound route must turn left: {}", b.steer);
}

proptest! {
    #[test]
    fn steer_is_zero_on_tangent(angle in -3.1f64..3.1, ox in -5.0f64..5.0, oy in -5.0f64..5.0, u in 0.0f64..0.8, speed in 0.0f64..2.0) {
        let dir = Vec2::from_polar(1.0, angle);
        let a = Vec2::new(ox, oy);
        let route = Arc::new(ReferencePath::new(vec![a, a + dir * 10.0], false).unwrap());
        let mut pp = PurePursuit::new(PurePursuitParams::default()).unwrap();
        pp.reset(route.clone(), 0).unwrap();
        let sp = pp.compute(&observation(route, a + dir * (10.0 * u), angle, speed)).unwrap();
        prop_assert!(sp.steer.abs() < 1e-9);
    }
}
