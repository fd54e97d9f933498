//! Replays the checked-in fuzz seeds through the same checks the fuzz
//! targets run, so a regression shows up without a nightly toolchain.

use std::path::PathBuf;

use factornet::dataio::{read_macro_csv, read_prices_csv, write_prices_csv};
use factornet::runner::{ExperimentConfig, Task};
use factornet::training::Checkpoint;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let path = e.unwrap().path();
            (
                path.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&path).unwrap(),
            )
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn prices_csv_seeds() {
    for (name, data) in seeds("prices_csv") {
        let res = read_prices_csv(data.as_slice());
        assert_eq!(res.is_ok(), name == "seed_valid", "{name}: {res:?}");
        if let Ok(panel) = res {
            let mut buf = Vec::new();
            write_prices_csv(&panel, &mut buf).unwrap();
            assert_eq!(read_prices_csv(buf.as_slice()).unwrap(), panel);
        }
    }
}

#[test]
fn macro_csv_seeds() {
    for (name, data) in seeds("macro_csv") {
        match read_macro_csv(data.as_slice()) {
            Ok(panel) => {
                let t = panel.transformed();
                if name == "seed_valid" || name == "seed_no_codes" {
                    t.unwrap();
                }
            }
            Err(e) => assert!(name == "seed_bad_code", "{name}: {e}"),
        }
    }
}

#[test]
fn config_json_seeds() {
    for (name, data) in seeds("config_json") {
        let text = std::str::from_utf8(&data).unwrap();
        let parsed = ExperimentConfig::from_json(text);
        let valid = match &parsed {
            Ok(cfg) => [Task::Benchmark, Task::Backtest]
                .iter()
                .any(|&t| cfg.validate(t).is_ok()),
            Err(_) => false,
        };
        assert_eq!(
            valid,
            name == "seed_benchmark" || name == "seed_backtest",
            "{name}: {:?}",
            parsed.err()
        );
    }
}

#[test]
fn checkpoint_json_seeds() {
    for (name, data) in seeds("checkpoint_json") {
        let text = std::str::from_utf8(&data).unwrap();
        match Checkpoint::from_json(text) {
            Ok(ckpt) => {
                ckpt.network().unwrap();
            }
            Err(e) => assert_eq!(name, "seed_truncated", "{e}"),
        }
    }
}
