"""Tensor layout helpers and parameter extraction shared by tests."""
import numpy as np
import torch

from fusegnet.attention import ChannelSE, SpatialSE


def to_nchw(x_hwc):
    return torch.as_tensor(np.ascontiguousarray(x_hwc.transpose(2, 0, 1)[None]), dtype=torch.float64)


def to_hwc(t):
    return t.detach()[0].permute(1, 2, 0).numpy()


def cse_params(cse: ChannelSE):
    b1 = cse.fc1.bias.detach().numpy() if cse.fc1.bias is not None else None
    b2 = cse.fc2.bias.detach().numpy() if cse.fc2.bias is not None else None
    return cse.fc1.weight.detach().numpy(), b1, cse.fc2.weight.detach().numpy(), b2


def sse_params(sse: SpatialSE):
    b = float(sse.project.bias.detach()[0]) if sse.project.bias is not None else None
    return sse.project.weight.detach().numpy().reshape(-1), b


# criterion number -> (title, passed); filled by the acceptance suite, printed by conftest
ACCEPTANCE_RESULTS = {}
