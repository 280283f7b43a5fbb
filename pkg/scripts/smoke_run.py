from app.adapters.artifact_store import ArtifactStore
from app.config import CONFIG_DIR, get_settings, load_train_config
from app.orchestrator import LabOrchestrator


def main() -> None:
    settings = get_settings()
    orchestrator = LabOrchestrator(settings, ArtifactStore(settings.runs_path))
    gradcheck = orchestrator.gradcheck(seed=0, trials=2)
    print("Gradient check passed:", gradcheck.all_passed)

    config = load_train_config(CONFIG_DIR / "synthetic_ccl.json", {"epochs": 3})
    report = orchestrator.train(config)
    print("Smoke run", report.run_id, "recall:", report.final_recall)


if __name__ == "__main__":
    main()
