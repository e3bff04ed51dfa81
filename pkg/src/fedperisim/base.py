"""Estimator conventions: parameter introspection and fit-state validation.

Mirrors the scikit-learn API surface (get_params/set_params, NotFittedError
on unfitted use) without importing scikit-learn, so the core stays
dependency-light while composing with sklearn-style tooling.
"""

import inspect

from .errors import NotFittedError


class ParamsMixin:
    """get_params/set_params backed by the __init__ signature.

    Subclasses must store every constructor argument as an attribute of the
    same name, which is also what sklearn's BaseEstimator requires.
    """

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return sorted(
            name
            for name, p in sig.parameters.items()
            if name != "self" and p.kind not in (p.VAR_POSITIONAL, p.VAR_KEYWORD)
        )

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(
                    f"invalid parameter {name!r} for {type(self).__name__}; "
                    f"valid parameters are {sorted(valid)}"
                )
            setattr(self, name, value)
        return self

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"{type(self).__name__}({args})"


def check_is_fitted(estimator, attributes):
    """Raise NotFittedError unless every listed attribute is present and set."""
    if isinstance(attributes, str):
        attributes = [attributes]
    missing = [a for a in attributes if getattr(estimator, a, None) is None]
    if missing:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit() before "
            f"using this method (missing: {missing})"
        )
