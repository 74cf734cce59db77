from . import autograd, loss_cfanet, modeling_cfanet
