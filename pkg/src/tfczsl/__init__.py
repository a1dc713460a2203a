"""Task-free continual generalized zero-shot learning."""
