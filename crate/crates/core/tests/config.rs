//! Config parsing: echo/load roundtrip, presets, overrides, and rejection of
//! malformed input.

use std::io::Write;

use ardu::config::RunConfig;
use ardu::model::Variant;

fn load_str(text: &str) -> ardu::Result<RunConfig> {
    let mut file = tempfile::NamedTempFile::new().unwrap();
    file.write_all(text.as_bytes()).unwrap();
    RunConfig::load(file.path())
}

#[test]
fn echo_roundtrips_through_load() {
    let mut cfg = RunConfig::default();
    cfg.set("variant", "half").unwrap();
    cfg.set("lr", "0.0003").unwrap();
    cfg.set("aspp_rates", "1, 4, 7").unwrap();
    cfg.set("expansion", "2").unwrap();
    cfg.set("data_dir", "some/dir").unwrap();
    let reloaded = load_str(&cfg.to_text()).unwrap();
    assert_eq!(reloaded.to_text(), cfg.to_text());
}

#[test]
fn comments_blanks_and_spacing_are_tolerated() {
    let cfg = load_str(
        "# leading comment\n\n  seed=5   # trailing comment\n  batch_size =  2\n",
    )
    .unwrap();
    assert_eq!(cfg.train.seed, 5);
    assert_eq!(cfg.train.batch_size, 2);
}

#[test]
fn full_preset_switches_model_and_batch_size() {
    let cfg = load_str("preset = full\n").unwrap();
    assert_eq!(cfg.model.input_extent, (192, 256));
    assert!((cfg.model.width_mult - 1.0).abs() < 1e-9);
    assert_eq!(cfg.train.batch_size, 8);
    assert_eq!(RunConfig::default().model.input_extent, (64, 64));
}

#[test]
fn later_keys_override_earlier_ones() {
    let cfg = load_str("preset = full\ninput_height = 64\ninput_width = 64\n").unwrap();
    assert_eq!(cfg.model.input_extent, (64, 64));
    assert!(matches!(cfg.model.variant, Variant::FullAttention));
}

#[test]
fn malformed_input_is_rejected_with_context() {
    for (text, needle) in [
        ("nonsense = 1\n", "nonsense"),
        ("lr = fast\n", "lr"),
        ("just a line\n", "key = value"),
        ("encoder2_widths = 1,2,3\n", "encoder2_widths"),
        ("preset = huge\n", "huge"),
    ] {
        let err = load_str(text).unwrap_err().to_string();
        assert!(err.contains(needle), "error for {text:?} was {err:?}");
    }
}

#[test]
fn validate_rejects_out_of_range_values() {
    let mut cfg = RunConfig::default();
    cfg.set("threshold", "1.5").unwrap();
    assert!(cfg.validate().is_err());

    let mut cfg = RunConfig::default();
    cfg.set("expansion", "0").unwrap();
    assert!(cfg.validate().is_err());

    let mut cfg = RunConfig::default();
    cfg.set("input_height", "50").unwrap();
    assert!(cfg.validate().is_err(), "extent must stay divisible by 16");
}
