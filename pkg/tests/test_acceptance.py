'''
End-to-end training runs on full-size synthetic corpora, three seeds each.
Deselected by default; run with `pytest -m slow`.
'''

import pytest

from analytics_service import AnalyticsService
from attention_providers import ATTENTION_SOURCES, make_attention_provider
from metrics import evaluate_records
from models import SceneSpec
from scene_data import generate_corpus, split_clips
from training import TrainConfig, generate_records, train_generator, train_vlm, vlm_validation_loss

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
CORPUS_SIZE = 2000

GENERATOR_RUN = dict(lr=1e-3, batch_size=16, epochs=150, step_size=50, gamma=0.1, patience=20)
EXPLAINER_RUN = dict(lr=1e-3, batch_size=32, epochs=40, step_size=25, gamma=0.1, patience=10,
                     encoder_warm_epochs=10)


def majority(flags):
    return sum(bool(f) for f in flags) >= 2


@pytest.fixture(scope="module")
def corpora():
    '''One default-spec corpus per seed.'''
    return {seed: generate_corpus(SceneSpec(seed=seed), CORPUS_SIZE) for seed in SEEDS}


@pytest.fixture(scope="module")
def generator_runs(corpora):
    '''seed -> (trained generator, history).'''
    return {seed: train_generator(TrainConfig(seed=seed, **GENERATOR_RUN), corpora[seed]) for seed in SEEDS}


# -------------------------------------------------------------------------------------------------
# Attention map generator
# -------------------------------------------------------------------------------------------------

class TestGeneratorRuns:
    '''Validation accuracy of the trained generator.'''

    def test_accuracy_targets(self, generator_runs):
        best = [history.best["validation"] for _, history in generator_runs.values()]
        assert majority(v["top1"] >= 0.90 and v["top3"] >= 0.98 for v in best), best

    def test_top1_improves_early(self, generator_runs):
        curves = [[e["validation"]["top1"] for e in history.epochs[:5]] for _, history in generator_runs.values()]
        assert all(len(curve) == 5 for curve in curves)
        assert majority(curve[-1] > curve[0] for curve in curves), curves

    def test_top3_never_below_top1(self, generator_runs):
        for _, history in generator_runs.values():
            for entry in history.epochs:
                assert entry["validation"]["top3"] >= entry["validation"]["top1"]


# -------------------------------------------------------------------------------------------------
# Attention variants
# -------------------------------------------------------------------------------------------------

def variant_report(clips, source, seed, generator=None):
    '''report.json content for one explainer trained with the given attention source.'''
    provider = make_attention_provider(source, generator=generator)
    model, _ = train_vlm(TrainConfig(seed=seed, attention_source=source, **EXPLAINER_RUN), clips, provider)
    _, val = split_clips(clips)
    report = evaluate_records(generate_records(model, val, provider),
                              ce_loss=vlm_validation_loss(model, val, provider), attention_source=source)
    return report.to_dict()


class TestVariantOrdering:
    '''none / predicted-patch / oracle-object ordering on held-out clips.'''

    def test_ordering_holds_in_most_seeds(self, corpora, generator_runs):
        service = AnalyticsService()
        ablations = []
        for seed in SEEDS:
            generator, _ = generator_runs[seed]
            reports = {source: variant_report(corpora[seed], source, seed, generator) for source in ATTENTION_SOURCES}
            ablations.append(service.build_ablation(reports, margin=0.02))
        assert majority(a["ordering_holds"] for a in ablations), [a["rows"] for a in ablations]
