use icl_meanshift::experiment::{self, ExperimentConfig, OutputDir, Preset};

fn small(preset: Preset, tasks: usize) -> ExperimentConfig {
    ExperimentConfig { tasks, ..preset.config() }
}

#[test]
fn manifest_replay_reproduces_results_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let first = OutputDir::create(dir.path().join("first")).unwrap();
    let second = OutputDir::create(dir.path().join("second")).unwrap();
    let config = small(Preset::Ssl, 24);
    experiment::run_experiment(&config, &first).unwrap();
    let replayed = ExperimentConfig::load(&first.path().join("manifest.json")).unwrap();
    assert_eq!(replayed, config);
    assert_eq!(replayed.sha256(), config.sha256());
    experiment::run_experiment(&replayed, &second).unwrap();
    for file in ["results.csv", "summary.json", "manifest.json"] {
        let a = std::fs::read(first.path().join(file)).unwrap();
        let b = std::fs::read(second.path().join(file)).unwrap();
        assert_eq!(a, b, "{file} differs on replay");
    }
}

#[test]
fn sweep_value_order_does_not_matter() {
    let a = small(Preset::Spirals, 12);
    let mut b = a.clone();
    for values in b.sweep.values_mut() {
        values.reverse();
    }
    let ra = experiment::sweep(&a).unwrap();
    let rb = experiment::sweep(&b).unwrap();
    assert_eq!(experiment::results_csv(&a, &ra).unwrap(), experiment::results_csv(&b, &rb).unwrap());
}

#[test]
fn a_cell_run_alone_matches_the_sweep() {
    let config = small(Preset::Spirals, 12);
    let results = experiment::sweep(&config).unwrap();
    let cells = config.cells();
    assert_eq!(cells.len(), results.len());
    for (cell, result) in cells.iter().zip(&results).step_by(7) {
        let alone = experiment::sweep(&ExperimentConfig { sweep: Default::default(), ..config.for_cell(cell).unwrap() }).unwrap();
        assert_eq!(alone[0].metrics, result.metrics, "cell {}", cell.key);
    }
}

#[test]
fn every_preset_validates_and_runs_a_few_tasks() {
    for preset in Preset::ALL {
        let mut config = small(preset, 3);
        config.sweep.clear();
        config.validate().unwrap();
        let results = experiment::sweep(&config).unwrap();
        assert_eq!(results.len(), 1, "{}", preset.name());
        assert!(results[0].error.is_none(), "{}: {:?}", preset.name(), results[0].error);
        assert!(results[0].metrics.values().all(|v| (0.0..=1.0).contains(v)));
    }
}
