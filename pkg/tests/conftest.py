import pytest
import torch

from quantlens import corpus, model, quant, training

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_world():
    return corpus.generate_world(seed=11, n_subjects=16, n_relations=2,
                                 targets_per_relation=4,
                                 given_pool=16, family_pool=16)


@pytest.fixture(scope="session")
def small_config(small_world):
    return model.ModelConfig(vocab_size=small_world.vocab.size, n_layers=4,
                             d_model=64, n_heads=2, head_dim=32, d_ff=172,
                             max_seq_len=16)


@pytest.fixture(scope="session")
def small_model(small_world, small_config):
    """A model that has fully memorized the small world, all paraphrases."""
    bundle = model.init_model(small_config, seed=0)
    examples = [corpus.supervised_example(small_world, f, t)
                for f in range(small_world.n_facts)
                for t in range(corpus.TEMPLATES_PER_RELATION)]
    tconf = training.TrainConfig(lr=5e-3, steps=4000, batch=32, seed=0,
                                 target_recall=1.0)
    trained, report = training.train(bundle, examples, tconf, examples)
    assert report.final_recall == 1.0, "fixture model failed to memorize"
    return trained


@pytest.fixture(scope="session")
def calib_prompts(small_world):
    return [corpus.render_prompt(small_world, f, 0)[0]
            for f in range(small_world.n_facts)]


@pytest.fixture(scope="session")
def small_rtn4(small_model, small_config):
    plan = quant.plan_uniform(small_config, quant.QuantSpec(bits=4, group_size=32))
    return quant.apply_plan(small_model, plan)[0]


@pytest.fixture(scope="session")
def small_rtn2(small_model, small_config):
    plan = quant.plan_uniform(small_config, quant.QuantSpec(bits=2, group_size=32))
    return quant.apply_plan(small_model, plan)[0]
