import torch
from torch import nn
from torch.nn import functional as F
from torch.nn.utils.parametrizations import weight_norm

LRELU_SLOPE = 0.1


def get_padding(kernel_size, dilation=1):
    return (kernel_size * dilation - dilation) // 2


def init_weights(m, mean=0.0, std=0.01):
    if isinstance(m, (nn.Conv1d, nn.ConvTranspose1d)):
        m.weight.data.normal_(mean, std)


def sequence_mask(lengths, max_len=None):
    if max_len is None:
        max_len = int(lengths.max())
    ids = torch.arange(max_len, device=lengths.device)
    return ids[None, :] < lengths[:, None]


def slice_segments(x, starts, size):
    """Gather ``x[b, :, starts[b]:starts[b]+size]`` for every batch item."""
    idx = starts[:, None] + torch.arange(size, device=x.device)[None, :]
    idx = idx[:, None, :].expand(x.size(0), x.size(1), size)
    return torch.gather(x, 2, idx)


class WN(nn.Module):
    """Non-causal gated dilated conv stack with global conditioning."""

    def __init__(self, hidden, kernel_size, dilation_rate, n_layers, gin_channels=0, p_dropout=0.0):
        super().__init__()
        assert kernel_size % 2 == 1
        self.hidden = hidden
        self.n_layers = n_layers
        self.gin_channels = gin_channels
        self.drop = nn.Dropout(p_dropout)
        self.in_layers = nn.ModuleList()
        self.res_skip_layers = nn.ModuleList()
        if gin_channels:
            self.cond_layer = nn.Conv1d(gin_channels, 2 * hidden * n_layers, 1)
        for i in range(n_layers):
            dilation = dilation_rate ** i
            self.in_layers.append(nn.Conv1d(hidden, 2 * hidden, kernel_size, dilation=dilation,
                                            padding=get_padding(kernel_size, dilation)))
            out = 2 * hidden if i < n_layers - 1 else hidden
            self.res_skip_layers.append(nn.Conv1d(hidden, out, 1))

    def forward(self, x, x_mask, g=None):
        output = torch.zeros_like(x)
        if g is not None:
            g = self.cond_layer(g)
        for i in range(self.n_layers):
            x_in = self.in_layers[i](x)
            if g is not None:
                off = i * 2 * self.hidden
                x_in = x_in + g[:, off:off + 2 * self.hidden]
            t, s = x_in.chunk(2, dim=1)
            acts = self.drop(torch.tanh(t) * torch.sigmoid(s))
            res_skip = self.res_skip_layers[i](acts)
            if i < self.n_layers - 1:
                x = (x + res_skip[:, :self.hidden]) * x_mask
                output = output + res_skip[:, self.hidden:]
            else:
                output = output + res_skip
        return output * x_mask


class ResBlock(nn.Module):
    """One branch of a multi-receptive-field fusion block."""

    def __init__(self, channels, kernel_size=3, dilations=(1, 3, 5)):
        super().__init__()
        self.convs1 = nn.ModuleList([
            weight_norm(nn.Conv1d(channels, channels, kernel_size, dilation=d,
                                  padding=get_padding(kernel_size, d)))
            for d in dilations])
        self.convs2 = nn.ModuleList([
            weight_norm(nn.Conv1d(channels, channels, kernel_size, padding=get_padding(kernel_size)))
            for _ in dilations])
        self.convs1.apply(init_weights)
        self.convs2.apply(init_weights)

    def forward(self, x):
        for c1, c2 in zip(self.convs1, self.convs2):
            xt = c2(F.leaky_relu(c1(F.leaky_relu(x, LRELU_SLOPE)), LRELU_SLOPE))
            x = x + xt
        return x


class MRF(nn.Module):
    def __init__(self, channels, kernels, dilations):
        super().__init__()
        self.blocks = nn.ModuleList([ResBlock(channels, k, d) for k, d in zip(kernels, dilations)])

    def forward(self, x):
        out = 0
        for block in self.blocks:
            out = out + block(x)
        return out / len(self.blocks)


def upsample_layer(in_ch, out_ch, rate):
    """Transposed conv whose output length is exactly ``rate`` times the input."""
    kernel = 2 * rate
    padding = (rate + 1) // 2
    return weight_norm(nn.ConvTranspose1d(in_ch, out_ch, kernel, rate, padding=padding,
                                          output_padding=rate % 2))
