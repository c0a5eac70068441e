import numpy as np
import pytest

from mbekit import tensor as T
from mbekit.errors import NonFiniteValueError, ShapeMismatchError
from mbekit.tensor import Tape, Tensor

GRAD_TOL = 1e-4
FD_STEP = 1e-5


def leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


class TestForwardValues:
    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((2, 2))
        out = T.matmul(Tensor(np.eye(2)), Tensor(a))
        np.testing.assert_allclose(out.data, a)

    def test_gram_of_orthonormal_rows(self):
        out = T.gram(Tensor(np.eye(2)))
        np.testing.assert_allclose(out.data, np.eye(2))

    def test_symmetric_eigenvalues_diagonal(self):
        w = T.symmetric_eigenvalues(Tensor(np.diag([2.0, 3.0])))
        np.testing.assert_allclose(w.data, [3.0, 2.0])

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        y = T.softmax(Tensor(rng.standard_normal((4, 7))))
        np.testing.assert_allclose(y.data.sum(axis=-1), np.ones(4), atol=1e-12)

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 5))
        a = T.gelu(Tensor(x)).data
        b = T.gelu(Tensor(x.copy())).data
        assert np.array_equal(a, b)


class TestBackwardBasics:
    def test_sum_of_squares(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        with Tape():
            loss = T.sum_all(T.mul(x, x))
            T.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_uniform_softmax_cross_entropy(self):
        logits = Tensor(np.zeros((1, 2)), requires_grad=True)
        with Tape():
            loss = T.softmax_cross_entropy(logits, np.array([0]))
            T.backward(loss)
        np.testing.assert_allclose(logits.grad, [[-0.5, 0.5]])

    def test_shared_input_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        with Tape():
            loss = T.sum_all(T.mul(x, x))
            T.backward(loss)
        np.testing.assert_allclose(x.grad, [6.0])

    def test_fanout_two_consumers(self):
        # y used by two downstream ops: gradients must add, not overwrite.
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        with Tape():
            y = T.scalar_mul(x, 2.0)
            loss = T.sum_all(T.add(y, y))
            T.backward(loss)
        np.testing.assert_allclose(x.grad, [4.0, 4.0])

    def test_double_backward_is_an_error(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        with Tape() as tape:
            loss = T.sum_all(x)
            T.backward(loss)
            with pytest.raises(RuntimeError, match="reset"):
                T.backward(loss)
        tape.reset()
        assert not tape._backward_done

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            y = T.scalar_mul(x, 2.0)
            with pytest.raises(ValueError, match="scalar"):
                T.backward(y)

    def test_off_tape_loss_rejected(self):
        x = Tensor(np.ones(()), requires_grad=True)
        with pytest.raises(ValueError, match="tape"):
            T.backward(x)


class TestShapeErrors:
    def test_add_rank_mismatch(self):
        with pytest.raises(ShapeMismatchError) as exc:
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
        assert exc.value.op == "add"
        assert exc.value.shape_a == (2, 3)

    def test_matmul_inner_dim(self):
        with pytest.raises(ShapeMismatchError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_broadcast_requires_size_one(self):
        with pytest.raises(ShapeMismatchError):
            T.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_explicit_size_one_broadcast_ok(self):
        out = T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((1, 3))))
        assert out.shape == (2, 3)


def fd_case(name, build, shape, seed):
    """(name, scalar function of a Tensor, input shape, seed)."""
    return pytest.param(build, shape, seed, id=name)


def _ln_params(d):
    gain = Tensor(np.ones(d))
    bias = Tensor(np.zeros(d))
    return gain, bias


FD_CASES = [
    fd_case("add", lambda x: T.sum_all(T.add(x, T.scalar_mul(x, 0.5))), (3, 4), 10),
    fd_case("sub", lambda x: T.sum_all(T.mul(T.sub(x, T.scalar_mul(x, 2.0)), x)), (3, 4), 11),
    fd_case("mul_broadcast", lambda x: T.sum_all(T.mul(x, T.reshape(T.sum_all(x), (1, 1)))), (2, 3), 12),
    fd_case("div", lambda x: T.sum_all(T.div(x, T.add_scalar(T.mul(x, x), 1.0))), (4,), 13),
    fd_case("scalar_mul", lambda x: T.sum_all(T.scalar_mul(x, -1.7)), (5,), 14),
    fd_case("matmul", lambda x: T.sum_all(T.matmul(x, T.transpose(x))), (3, 4), 15),
    fd_case("batched_matmul", lambda x: T.sum_all(T.matmul(x, T.permute(x, (0, 2, 1)))), (2, 3, 4), 16),
    fd_case("reshape", lambda x: T.sum_all(T.mul(T.reshape(x, (6,)), T.reshape(x, (6,)))), (2, 3), 17),
    fd_case("relu", lambda x: T.sum_all(T.mul(T.relu(x), x)), (4, 4), 18),
    fd_case("gelu", lambda x: T.sum_all(T.gelu(x)), (4, 4), 19),
    fd_case("log", lambda x: T.sum_all(T.log(T.add_scalar(T.mul(x, x), 1.0))), (5,), 20),
    fd_case("pow_const", lambda x: T.sum_all(T.pow_const(T.add_scalar(T.mul(x, x), 0.5), 1.7)), (5,), 21),
    fd_case("clip_min", lambda x: T.sum_all(T.mul(T.clip_min(x, 0.25), x)), (6,), 22),
    fd_case("abs", lambda x: T.sum_all(T.mul(T.abs_(x), x)), (6,), 23),
    fd_case("mean", lambda x: T.mean_all(T.mul(x, x)), (3, 5), 24),
    fd_case("softmax", lambda x: T.sum_all(T.mul(T.softmax(x), x)), (3, 5), 25),
    fd_case(
        "layer_norm",
        lambda x: T.sum_all(T.mul(T.layer_norm(x, *_ln_params(5)), x)),
        (3, 5),
        26,
    ),
    fd_case("gram", lambda x: T.frobenius_norm_sq(T.gram(x)), (4, 3), 27),
    fd_case("trace", lambda x: T.trace(T.gram(x)), (4, 3), 28),
    fd_case("frobsq", lambda x: T.frobenius_norm_sq(x), (3, 4), 29),
    fd_case(
        "eigenvalues",
        lambda x: T.sum_all(T.log(T.add_scalar(T.symmetric_eigenvalues(T.gram(x)), 1.0))),
        (5, 3),
        30,
    ),
]


@pytest.mark.parametrize("build,shape,seed", FD_CASES)
def test_gradients_match_finite_differences(build, shape, seed):
    rng = np.random.default_rng(seed)
    for _ in range(10):
        point = rng.standard_normal(shape)
        assert T.grad_check(build, point, step=FD_STEP) <= GRAD_TOL


def test_grad_check_linear_function_is_exact():
    rng = np.random.default_rng(31)
    err = T.grad_check(T.sum_all, rng.standard_normal((4, 4)), step=FD_STEP)
    assert err <= 1e-10


def test_grad_check_flags_nonfinite():
    with pytest.raises(NonFiniteValueError, match="coordinate"):
        T.grad_check(lambda x: T.sum_all(T.log(x)), np.array([1.0, -1.0]), step=FD_STEP)


class TestEmbeddingAndXent:
    def test_embedding_scatter_adds(self):
        table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        with Tape():
            out = T.embedding(table, np.array([0, 2, 0]))
            loss = T.sum_all(out)
            T.backward(loss)
        np.testing.assert_allclose(table.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])

    def test_embedding_id_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            T.embedding(Tensor(np.zeros((3, 2))), np.array([3]))

    def test_xent_gradient_matches_fd(self):
        rng = np.random.default_rng(33)
        targets = rng.integers(0, 5, size=8)
        weights = rng.uniform(0.1, 1.0, size=8)

        def f(x):
            return T.softmax_cross_entropy(x, targets, weights)

        for _ in range(5):
            err = T.grad_check(f, rng.standard_normal((8, 5)), step=FD_STEP)
            assert err <= GRAD_TOL

    def test_xent_masked_positions_get_no_gradient(self):
        logits = Tensor(np.random.default_rng(34).standard_normal((3, 4)), requires_grad=True)
        weights = np.array([1.0, 0.0, 1.0])
        with Tape():
            loss = T.softmax_cross_entropy(logits, np.array([1, 2, 3]), weights)
            T.backward(loss)
        np.testing.assert_allclose(logits.grad[1], np.zeros(4))


class TestGramSpectrum:
    def test_gram_psd_and_trace_consistency(self):
        rng = np.random.default_rng(35)
        for _ in range(10):
            r = rng.standard_normal((6, 4))
            k = T.gram(Tensor(r))
            w = T.symmetric_eigenvalues(k).data
            assert np.all(w >= -1e-9)
            np.testing.assert_allclose(
                w.sum(), np.trace(k.data), rtol=1e-8, atol=1e-12
            )

    def test_eigenvalues_require_symmetry(self):
        with pytest.raises(ValueError, match="symmetric"):
            T.symmetric_eigenvalues(Tensor(np.array([[1.0, 2.0], [0.0, 1.0]])))


class TestLayerNormStats:
    def test_pre_gain_mean_and_variance(self):
        rng = np.random.default_rng(36)
        x = Tensor(rng.standard_normal((10, 8)) * 3 + 1)
        y = T.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
        mean = y.data.mean(axis=-1)
        var = y.data.var(axis=-1)
        assert np.all(np.abs(mean) < 1e-6)
        assert np.all(np.abs(var - 1.0) < 1e-4)
