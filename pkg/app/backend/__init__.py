# Backend package for volumes, phantom data, evaluation and utility operations
