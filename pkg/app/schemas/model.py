"""
app/schemas/model.py

Architecture description for classifiers factored as f = [Φ, v].

``ModelSpec`` is frozen (hashable) so graph builders can cache on it.
"""

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator


class ModelSpec(BaseModel):
    """Feature extractor Φ plus linear head v.

    ``mlp``:  ``depth`` ReLU layers of width ``hidden_dim``.
    ``attn``: dense embedding, single-head self-attention over ``tokens`` tokens of
    width ``input_dim / tokens``, token-wise ReLU feedforward of width ``hidden_dim``,
    mean-pooled over tokens.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    architecture: Literal["mlp", "attn"] = "mlp"
    input_dim: int = Field(..., gt=0)
    hidden_dim: int = Field(..., gt=0)
    num_classes: int = Field(..., gt=0)
    depth: int = Field(default=2, gt=0, description="MLP hidden layers (ignored by attn)")
    tokens: int | None = Field(default=None, gt=0, description="Token count T (attn only)")

    @model_validator(mode="after")
    def attention_needs_token_split(self) -> "ModelSpec":
        if self.architecture == "attn":
            if self.tokens is None:
                raise ValueError("attn architecture requires `tokens`")
            if self.input_dim % self.tokens != 0:
                raise ValueError(
                    f"input_dim={self.input_dim} is not divisible by tokens={self.tokens}"
                )
        return self

    @property
    def token_dim(self) -> int:
        if self.architecture != "attn" or self.tokens is None:
            raise ValueError("token_dim is only defined for the attn architecture")
        return self.input_dim // self.tokens

    @property
    def feature_dim(self) -> int:
        return self.hidden_dim
