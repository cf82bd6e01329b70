use humanwarp_demo::{figure_view, refine_view, uncertainty_view};

#[test]
fn figure_views_fill_the_figure_and_leave_the_background() {
    for view in ["rgb", "depth", "normals", "parts"] {
        let img = figure_view(3.0, 4, view, 64).unwrap();
        assert_eq!((img.width(), img.height()), (64, 64));
        assert_eq!(img.rgba().len(), 64 * 64 * 4);
        assert_eq!(img.rgba_at(0, 0), [24, 24, 28, 255], "{view}");
        assert_ne!(img.rgba_at(32, 22), [24, 24, 28, 255], "{view}");
        assert!(img.value() > 500.0, "{view}: {}", img.value());
        assert!(img.caption().starts_with("frame 4, 12 deg turned"), "{}", img.caption());
    }
}

#[test]
fn bad_arguments_are_rejected() {
    assert!(figure_view(3.0, 0, "albedo", 64).is_err());
    assert!(figure_view(3.0, 0, "rgb", 8).is_err());
    assert!(uncertainty_view(-1.0, 64).is_err());
    assert!(refine_view(0.0, 10, 0, 64).is_err());
    assert!(refine_view(10.0, 0, 0, 64).is_err());
}

#[test]
fn a_moderate_baseline_is_most_certain() {
    // Too little rotation adds no new view directions; too much turns parts
    // away so fewer cells are seen again.
    let u = |deg| uncertainty_view(deg, 64).unwrap().value();
    let (still, moderate, far) = (u(0.0), u(30.0), u(120.0));
    assert!(moderate < still && moderate < far, "{still} {moderate} {far}");
}

#[test]
fn refinement_lowers_the_error() {
    let img = refine_view(10.0, 60, 1, 96).unwrap();
    assert_eq!((img.width(), img.height()), (2 * 96 + 4, 96));
    assert!(img.value() < 10.0, "{}", img.caption());
    assert!(img.caption().starts_with("RMSE "), "{}", img.caption());
}
