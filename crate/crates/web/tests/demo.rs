use mwgs_web::{Demo, MAX_LEVEL};

fn demo() -> Demo {
    Demo::build(3).unwrap()
}

#[test]
fn buffers_match_the_advertised_sizes() {
    let d = demo();
    let n = 4 * d.width() * d.height();
    for level in 0..=MAX_LEVEL {
        assert_eq!(d.packet_mosaic(0, level, level % 2 == 1).unwrap().len(), n);
    }
    assert_eq!(d.orbit_render(0.3, 0.4).unwrap().len(), n);
    assert_eq!(d.attention(0.3, 0.4).unwrap().len(), 4 * d.attention_width() * d.attention_height());
}

#[test]
fn level_zero_mosaic_is_the_stretched_view() {
    let d = demo();
    let m = d.packet_mosaic(1, 0, false).unwrap();
    assert!(m.chunks_exact(4).all(|p| p[3] == 255));
    let rgb: Vec<u8> = m.chunks_exact(4).flat_map(|p| p[..3].to_vec()).collect();
    assert!(rgb.contains(&255) && rgb.contains(&0));
    assert_ne!(m, d.packet_mosaic(1, 2, false).unwrap());
    assert_ne!(d.packet_mosaic(1, 2, true).unwrap(), d.packet_mosaic(1, 2, false).unwrap());
}

#[test]
fn orbit_and_attention_follow_the_camera() {
    let d = demo();
    let a = d.orbit_render(0.0, 0.3).unwrap();
    assert_eq!(a, d.orbit_render(0.0, 0.3).unwrap());
    assert_ne!(a, d.orbit_render(1.0, 0.3).unwrap());
    assert!(a.chunks_exact(4).any(|p| p[..3] != [0, 0, 0]));
    // elevations past the pole are clamped rather than degenerate
    assert!(d.orbit_render(0.0, 10.0).is_ok());
    let h = d.attention(0.0, 0.3).unwrap();
    assert!(h.iter().any(|&v| v != 0 && v != 255));
    assert_ne!(h, d.attention(2.0, 0.3).unwrap());
}

#[test]
fn same_seed_same_demo() {
    assert_eq!(demo().orbit_render(0.5, 0.2).unwrap(), demo().orbit_render(0.5, 0.2).unwrap());
    assert_ne!(demo().orbit_render(0.5, 0.2).unwrap(), Demo::build(4).unwrap().orbit_render(0.5, 0.2).unwrap());
}
