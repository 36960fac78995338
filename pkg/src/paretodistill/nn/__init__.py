from .functional import (
    DivergenceInfiniteError,
    NoLegalActionError,
    NonFiniteError,
    check_finite,
    conv2d_forward,
    dense_forward,
    kl_divergence,
    lstm_cell_forward,
    masked_temperature_softmax,
    multi_head_attention_forward,
    set_max_pool,
)
from .gradcheck import finite_diff_check
from .layers import (
    Concat,
    Conv2d,
    Dense,
    DotProductScore,
    LayerSpec,
    LSTMCell,
    MaskedTemperatureSoftmax,
    MultiHeadAttention,
    ReLU,
    SetMaxPool,
)
from .optim import AdamState, adam_step
