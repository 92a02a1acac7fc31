import numpy as np
import pytest

from ovseg.prompts import (
    DEFAULT_TEMPLATES,
    LearnedPrompt,
    PromptSet,
    PromptTrainConfig,
    build_class_embeddings,
    load_learned_prompt,
    prompt_loss_and_grad,
    render_template,
    save_learned_prompt,
    select_template,
    train_learned_prompt,
)
from ovseg.rng import SplitMix64
from ovseg.vlm import init_vlm, l2_normalize

from gradcheck import check_tensor_grad

CLASS_NAMES = ["red circle", "green square", "blue triangle", "grass"]
CORPUS = ["a photo of a thing"] + CLASS_NAMES + [t.replace("{}", "") for t in DEFAULT_TEMPLATES]


@pytest.fixture(scope="module")
def model():
    return init_vlm(CORPUS, seed=7, d_tok=8, d=8, hidden=10, s_eval=8.0)


def test_render_template():
    assert render_template("a photo of a {}", "red circle") == "a photo of a red circle"
    assert render_template("{}", "grass") == "grass"


def test_prompt_set_rejects_bad_templates():
    with pytest.raises(ValueError):
        PromptSet(("a photo",))
    with pytest.raises(ValueError):
        PromptSet(("{} and {}",))
    with pytest.raises(ValueError):
        PromptSet(())
    assert len(PromptSet()) == 8


def test_template_embeddings_match_encode_text(model):
    embs = build_class_embeddings(model, CLASS_NAMES, "a photo of a {}")
    assert embs.shape == (4, model.dim)
    np.testing.assert_allclose(np.linalg.norm(embs, axis=1), 1.0, atol=1e-12)
    for i, name in enumerate(CLASS_NAMES):
        np.testing.assert_array_equal(embs[i], model.encode_text(f"a photo of a {name}"))


def test_zero_token_prompt_equals_bare_template(model):
    prompt = LearnedPrompt(np.zeros((0, model.text.tok_embed.shape[1])))
    learned = build_class_embeddings(model, CLASS_NAMES, prompt)
    bare = build_class_embeddings(model, CLASS_NAMES, "{}")
    np.testing.assert_allclose(learned, bare, atol=1e-14)


def test_distinct_templates_give_distinct_embeddings(model):
    a = build_class_embeddings(model, CLASS_NAMES, "a photo of a {}")
    b = build_class_embeddings(model, CLASS_NAMES, "{}")
    cosines = np.sum(a * b, axis=1)
    assert np.any(cosines < 1.0 - 1e-9)


def test_empty_vocabulary_rejected(model):
    with pytest.raises(ValueError):
        build_class_embeddings(model, [], "{}")


def _labelled_embeddings(model, n_per_class, seed):
    """Unit vectors near each class's '{}' embedding, with labels."""
    rng = SplitMix64(seed)
    base = build_class_embeddings(model, CLASS_NAMES, "{}")
    embs, labels = [], []
    for c in range(len(CLASS_NAMES)):
        for _ in range(n_per_class):
            noisy = base[c] + rng.uniform_array(model.dim, -0.2, 0.2)
            embs.append(noisy / np.linalg.norm(noisy))
            labels.append(c)
    return np.stack(embs), np.array(labels)


class TestSelectTemplate:
    def test_single_template_wins_by_default(self, model):
        embs, labels = _labelled_embeddings(model, 3, seed=1)
        best, accs = select_template(model, PromptSet(("a photo of a {}",)), embs, labels, CLASS_NAMES)
        assert best == 0 and len(accs) == 1

    def test_tie_breaks_to_earlier_index(self, model):
        embs, labels = _labelled_embeddings(model, 3, seed=2)
        ps = PromptSet(("a {} here", "a {} here"))
        best, accs = select_template(model, ps, embs, labels, CLASS_NAMES)
        assert accs[0] == accs[1]
        assert best == 0

    def test_accuracies_match_brute_force_recount(self, model):
        embs, labels = _labelled_embeddings(model, 5, seed=3)
        ps = PromptSet(DEFAULT_TEMPLATES)
        best, accs = select_template(model, ps, embs, labels, CLASS_NAMES)
        for t_idx, template in enumerate(ps.templates):
            class_embs = build_class_embeddings(model, CLASS_NAMES, template)
            hits = 0
            for i in range(embs.shape[0]):
                scores = [float(embs[i] @ class_embs[c]) for c in range(len(CLASS_NAMES))]
                if scores.index(max(scores)) == labels[i]:
                    hits += 1
            assert accs[t_idx] == hits / embs.shape[0]
        assert accs[best] == max(accs)

    def test_empty_samples_rejected(self, model):
        with pytest.raises(ValueError):
            select_template(model, PromptSet(), np.zeros((0, model.dim)), np.zeros(0, int), CLASS_NAMES)

    def test_repeated_calls_agree(self, model):
        embs, labels = _labelled_embeddings(model, 4, seed=4)
        first = select_template(model, PromptSet(), embs, labels, CLASS_NAMES)
        second = select_template(model, PromptSet(), embs, labels, CLASS_NAMES)
        assert first == second


class TestTrainLearnedPrompt:
    def test_zero_steps_returns_initialization(self, model):
        embs, labels = _labelled_embeddings(model, 2, seed=5)
        cfg = PromptTrainConfig(m=4, steps=0, seed=11)
        prompt, _ = train_learned_prompt(model, embs, labels, CLASS_NAMES, cfg)
        expected = SplitMix64(11).uniform_array((4, model.text.tok_embed.shape[1]), -0.05, 0.05)
        np.testing.assert_array_equal(prompt.tokens, expected)

    def test_gradient_matches_finite_differences(self, model):
        # Well-scaled point: tiny init norms make the normalization too curved
        # for h=1e-5 differences.
        rng = SplitMix64(99)
        for trial in range(10):
            embs, labels = _labelled_embeddings(model, 2, seed=20 + trial)
            tokens = rng.uniform_array((3, model.text.tok_embed.shape[1]), -0.5, 0.5)

            def loss_fn():
                return prompt_loss_and_grad(model, LearnedPrompt(tokens), embs, labels, CLASS_NAMES)[0]

            _, grad = prompt_loss_and_grad(model, LearnedPrompt(tokens), embs, labels, CLASS_NAMES)
            check_tensor_grad(loss_fn, tokens, grad, rng)

    def test_model_parameters_untouched(self, model):
        before = {name: arr.copy() for name, arr in model.param_items()}
        embs, labels = _labelled_embeddings(model, 3, seed=6)
        train_learned_prompt(model, embs, labels, CLASS_NAMES, PromptTrainConfig(steps=50))
        for name, arr in model.param_items():
            assert arr.tobytes() == before[name].tobytes(), name

    def test_training_reduces_loss(self, model):
        embs, labels = _labelled_embeddings(model, 6, seed=7)
        cfg = PromptTrainConfig(m=4, steps=150, batch_size=24, seed=3)
        prompt, log = train_learned_prompt(model, embs, labels, CLASS_NAMES, cfg)
        init = LearnedPrompt(SplitMix64(3).uniform_array((4, model.text.tok_embed.shape[1]), -0.05, 0.05))
        loss_before, _ = prompt_loss_and_grad(model, init, embs, labels, CLASS_NAMES)
        loss_after, _ = prompt_loss_and_grad(model, prompt, embs, labels, CLASS_NAMES)
        assert loss_after < loss_before
        assert 0.0 <= log["train_accuracy"] <= 1.0

    def test_deterministic_given_seed(self, model):
        embs, labels = _labelled_embeddings(model, 2, seed=8)
        cfg = PromptTrainConfig(m=2, steps=20, seed=5)
        a, _ = train_learned_prompt(model, embs, labels, CLASS_NAMES, cfg)
        b, _ = train_learned_prompt(model, embs, labels, CLASS_NAMES, cfg)
        assert a.tokens.tobytes() == b.tokens.tobytes()

    def test_empty_samples_rejected(self, model):
        with pytest.raises(ValueError):
            train_learned_prompt(model, np.zeros((0, model.dim)), np.zeros(0, int), CLASS_NAMES, PromptTrainConfig())


def test_save_load_roundtrip(tmp_path, model):
    prompt = LearnedPrompt(SplitMix64(1).uniform_array((4, 8), -0.05, 0.05))
    path = tmp_path / "prompt.json"
    save_learned_prompt(prompt, path)
    loaded = load_learned_prompt(path)
    assert loaded.tokens.tobytes() == prompt.tokens.tobytes()
    with pytest.raises(ValueError):
        path2 = tmp_path / "bad.json"
        path2.write_text('{"kind": "vlm"}')
        load_learned_prompt(path2)
