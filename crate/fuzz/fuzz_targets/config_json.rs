#![no_main]

use factornet::runner::{ExperimentConfig, Task};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_json(text) {
        for task in [
            Task::Simulate,
            Task::Benchmark,
            Task::Sweep,
            Task::Tune,
            Task::Backtest,
            Task::Macro,
        ] {
            let _ = cfg.validate(task);
        }
    }
});
