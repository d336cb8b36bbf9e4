//! End-to-end exercises of the command-line surface through
//! `cli::dispatch`, covering the documented exit-code contract and the
//! rerun-reproducibility guarantee.

use std::path::Path;

use glyphflow::cli::{dispatch, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use glyphflow::glyphs;
use glyphflow::imaging::load_png;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["glyphflow"];
    argv.extend_from_slice(args);
    dispatch(argv)
}

fn read_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn render_glyph_roundtrips_through_recognizer() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.png");
    let code = run(&["render-glyph", "--text", "AB", "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    let img = load_png(&out).unwrap();
    let font = glyphs::fonts().by_name("english").unwrap();
    assert_eq!(glyphs::recognize(&img, font), "AB");
}

#[test]
fn render_glyph_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    for (out, _) in [(&a, 0), (&b, 1)] {
        assert_eq!(
            run(&["render-glyph", "--text", "XY7", "--scale", "2", "--out", out.to_str().unwrap()]),
            EXIT_OK
        );
    }
    assert_eq!(read_bytes(&a), read_bytes(&b));
}

#[test]
fn unknown_flag_is_usage_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never.png");
    let code = run(&[
        "render-glyph",
        "--text",
        "A",
        "--out",
        out.to_str().unwrap(),
        "--definitely-not-a-flag",
    ]);
    assert_eq!(code, EXIT_USAGE);
    assert!(!out.exists());
}

#[test]
fn unmapped_codepoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.png");
    let code = run(&["render-glyph", "--text", "a~b", "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_DATA);
}

#[test]
fn synth_data_is_reproducible_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let d1 = dir.path().join("one");
    let d2 = dir.path().join("two");
    for d in [&d1, &d2] {
        let code = run(&[
            "synth-data",
            "--langs",
            "english,thai",
            "--count",
            "6",
            "--paired",
            "--out",
            d.to_str().unwrap(),
            "--resolution",
            "32",
            "--oov-fraction",
            "0",
        ]);
        assert_eq!(code, EXIT_OK);
    }
    assert_eq!(
        read_bytes(&d1.join("manifest.txt")),
        read_bytes(&d2.join("manifest.txt"))
    );
    let code = run(&[
        "validate-pairs",
        "--manifest",
        d1.join("manifest.txt").to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    // an impossible threshold turns validation failures into exit 2
    let code = run(&[
        "validate-pairs",
        "--manifest",
        d1.join("manifest.txt").to_str().unwrap(),
        "--thresholds",
        "style=0.000001",
    ]);
    assert_eq!(code, EXIT_DATA);
}

#[test]
fn full_pipeline_train_edit_eval_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(
        run(&[
            "synth-data",
            "--langs",
            "english,arabic",
            "--count",
            "8",
            "--paired",
            "--out",
            data.to_str().unwrap(),
            "--resolution",
            "24",
            "--test-fraction",
            "0.25",
            "--oov-fraction",
            "0",
        ]),
        EXIT_OK
    );

    // tiny training config
    let cfg_path = dir.path().join("train.cfg");
    std::fs::write(
        &cfg_path,
        "stage=pretrain\nlr=0.001\naccum_steps=2\nmax_steps=3\ncheckpoint_every=2\n\
         resolution=24\nd_model=8\nheads=2\ndual_blocks=1\nsingle_blocks=1\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    assert_eq!(
        run(&[
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]),
        EXIT_OK
    );
    let ckpt = out.join("checkpoint_final.mste");
    assert!(ckpt.exists());
    assert!(out.join("loss_log.txt").exists());

    // resume to the same step count is a no-op that still succeeds
    assert_eq!(
        run(&[
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--resume",
        ]),
        EXIT_OK
    );

    // edit one test record twice; outputs must be byte-identical
    let manifest = glyphflow::dataset::Manifest::load(&data.join("manifest.txt")).unwrap();
    let record = manifest
        .records
        .iter()
        .find(|r| r.split == "test")
        .expect("has a test record");
    let image = data.join(&record.src_path);
    let mask = data.join(&record.mask_path);
    let e1 = dir.path().join("edit1.png");
    let e2 = dir.path().join("edit2.png");
    for out_png in [&e1, &e2] {
        assert_eq!(
            run(&[
                "edit",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--image",
                image.to_str().unwrap(),
                "--mask",
                mask.to_str().unwrap(),
                "--text",
                &record.target_text,
                "--steps",
                "2",
                "--out",
                out_png.to_str().unwrap(),
            ]),
            EXIT_OK
        );
    }
    assert_eq!(read_bytes(&e1), read_bytes(&e2));

    // off-mask pixels of the edit equal the source image exactly
    let source = load_png(&image).unwrap();
    let edited = load_png(&e1).unwrap();
    let mask_img = glyphflow::imaging::load_mask_png(&mask).unwrap();
    for y in 0..source.height() {
        for x in 0..source.width() {
            if mask_img.get(y, x) == 0 {
                for c in 0..3 {
                    assert_eq!(source.get(y, x, c), edited.get(y, x, c));
                }
            }
        }
    }

    // predictions directory -> eval report
    let preds = dir.path().join("preds");
    std::fs::create_dir_all(&preds).unwrap();
    for r in &manifest.records {
        std::fs::copy(data.join(&r.edit_path), preds.join(format!("{}.pred.png", r.id))).unwrap();
    }
    let report = dir.path().join("report.txt");
    assert_eq!(
        run(&[
            "eval",
            "--pred-dir",
            preds.to_str().unwrap(),
            "--manifest",
            data.join("manifest.txt").to_str().unwrap(),
            "--out-report",
            report.to_str().unwrap(),
        ]),
        EXIT_OK
    );
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("seq_acc=1.000000"), "{text}");

    // two-language protocol, minimal budgets
    let proto_report = dir.path().join("protocol.txt");
    assert_eq!(
        run(&[
            "protocol",
            "--order",
            "english,arabic",
            "--data",
            data.to_str().unwrap(),
            "--config",
            cfg_path.to_str().unwrap(),
            "--out-report",
            proto_report.to_str().unwrap(),
            "--eval-per-language",
            "2",
            "--sampler-steps",
            "2",
        ]),
        EXIT_OK
    );
    let text = std::fs::read_to_string(&proto_report).unwrap();
    assert!(text.contains("lang=english step=1"), "{text}");
    assert!(text.contains("lang=arabic step=2"), "{text}");
    assert!(!text.contains("lang=arabic step=1"), "{text}");
}

#[test]
fn make_prompts_writes_bundle_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("ds");
    assert_eq!(
        run(&[
            "synth-data",
            "--langs",
            "english",
            "--count",
            "2",
            "--out",
            data.to_str().unwrap(),
            "--resolution",
            "32",
            "--oov-fraction",
            "0",
        ]),
        EXIT_OK
    );
    let manifest = glyphflow::dataset::Manifest::load(&data.join("manifest.txt")).unwrap();
    let record = &manifest.records[0];
    let out = dir.path().join("bundle");
    assert_eq!(
        run(&[
            "make-prompts",
            "--image",
            data.join(&record.src_path).to_str().unwrap(),
            "--mask",
            data.join(&record.mask_path).to_str().unwrap(),
            "--text",
            "ZW",
            "--config",
            "text_glyph_style",
            "--out-dir",
            out.to_str().unwrap(),
        ]),
        EXIT_OK
    );
    for file in ["glyph.png", "style.png", "masked.png", "mask.png", "content_emb.gft", "style_emb.gft"] {
        assert!(out.join(file).exists(), "missing {file}");
    }
    let emb = glyphflow::tensor::gft::load(&out.join("content_emb.gft")).unwrap();
    assert_eq!(emb.shape(), &[2, 32]);
}

#[test]
fn missing_input_files_exit_with_data_code() {
    let code = run(&[
        "eval",
        "--pred-dir",
        "/nonexistent/preds",
        "--manifest",
        "/nonexistent/manifest.txt",
        "--out-report",
        "/tmp/never-report.txt",
    ]);
    assert_eq!(code, EXIT_DATA);
}
