"""Motion generation from text for a given body: FSQ tokenizer, token predictor, metrics."""

__version__ = "0.1.0"
