use std::path::Path;
use std::process::{Command, Output};

use adapternet::colorsim::ImageU8;

fn adapternet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adapternet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_png(path: &Path, img: &ImageU8) {
    image::RgbImage::from_raw(
        img.width() as u32,
        img.height() as u32,
        img.pixels().to_vec(),
    )
    .unwrap()
    .save(path)
    .unwrap();
}

fn read_png(path: &Path) -> ImageU8 {
    let img = image::open(path).unwrap().to_rgb8();
    ImageU8::new(img.height() as usize, img.width() as usize, img.into_raw()).unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = adapternet(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = adapternet(&["show-config", "--verbose"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evaluate_names_a_missing_model() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bin");
    let o = adapternet(&["evaluate", "--backbone", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("nope.bin"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn show_config_prints_parseable_defaults() {
    let o = adapternet(&["show-config", "--seed", "7"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let cfg = adapternet::config::RunConfig::from_toml(&text).unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.adapter.layers, 5);
}

#[test]
fn bad_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    let text = adapternet::config::RunConfig::default().to_toml() + "\nextra = 1\n";
    std::fs::write(&path, text).unwrap();
    let o = adapternet(&["show-config", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("extra"), "{}", stderr(&o));
}

#[test]
fn transform_writes_one_png_per_input() {
    let dir = tempfile::tempdir().unwrap();
    let (input, out) = (dir.path().join("in"), dir.path().join("out"));
    std::fs::create_dir(&input).unwrap();
    let imgs = [
        ImageU8::filled(4, 5, [200, 40, 40]),
        ImageU8::filled(3, 3, [10, 90, 220]),
    ];
    for (i, img) in imgs.iter().enumerate() {
        write_png(&input.join(format!("{i}.png")), img);
    }
    std::fs::write(input.join("notes.txt"), "skip me").unwrap();

    let run = |args: &[&str], out: &Path| {
        let mut full = vec![
            "transform",
            "--in",
            input.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ];
        full.extend_from_slice(args);
        let o = adapternet(&full);
        assert!(o.status.success(), "{}", stderr(&o));
    };
    run(&["--scenario", "color-rotation", "--theta", "150"], &out);
    let written: Vec<_> = std::fs::read_dir(&out).unwrap().collect();
    assert_eq!(written.len(), 2);
    for (i, img) in imgs.iter().enumerate() {
        let got = read_png(&out.join(format!("{i}.png")));
        let expected = adapternet::colorsim::color_rotate_image(img, 150.0);
        assert_eq!(got, expected);
    }

    let power_out = dir.path().join("power");
    run(
        &["--scenario", "power", "--exponents", "0.2,0.3,0.4"],
        &power_out,
    );
    let got = read_png(&power_out.join("0.png"));
    let expected = adapternet::colorsim::power_transform(&imgs[0], &Default::default());
    assert_eq!(got, expected);

    // same input, same parameters, same bytes
    let again = dir.path().join("again");
    run(&["--scenario", "color-rotation", "--theta", "150"], &again);
    assert_eq!(
        std::fs::read(out.join("1.png")).unwrap(),
        std::fs::read(again.join("1.png")).unwrap()
    );
}

#[test]
fn power_exponents_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let o = adapternet(&[
        "transform",
        "--scenario",
        "power",
        "--exponents",
        "0.2,-1,0.4",
        "--in",
        dir.path().to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
}

#[test]
fn export_adapted_with_identity_adapter_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let (input, out) = (dir.path().join("in"), dir.path().join("out"));
    std::fs::create_dir(&input).unwrap();
    let img = ImageU8::new(2, 2, (0..12).map(|v| v * 20).collect()).unwrap();
    write_png(&input.join("a.png"), &img);
    let model = dir.path().join("adapter.bin");
    adapternet::persist::ModelFile::from_adapter(
        &adapternet::models::AdapterNet::identity(5).unwrap(),
        0,
    )
    .save(&model)
    .unwrap();
    let o = adapternet(&[
        "export-adapted",
        "--adapter",
        model.to_str().unwrap(),
        "--in",
        input.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_png(&out.join("a.png")), img);
}

#[test]
fn synth_data_round_trips_through_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    let mut cfg = adapternet::config::RunConfig::default();
    cfg.synthetic.train_size = 25;
    cfg.synthetic.pool_size = 12;
    std::fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let data = dir.path().join("data");
    let o = adapternet(&[
        "synth-data",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let train = adapternet::cifar::ingest_train(&data).unwrap();
    let pool = adapternet::cifar::ingest_test(&data).unwrap();
    let (gen_train, gen_pool) = adapternet::synth::generate_sets(&cfg.synthetic);
    assert_eq!((train, pool), (gen_train, gen_pool));
}

#[test]
fn gradcheck_passes() {
    let o = adapternet(&["gradcheck", "--instances", "2", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(
        out.lines().count() >= 8 && out.lines().all(|l| l.ends_with("ok")),
        "{out}"
    );
}
