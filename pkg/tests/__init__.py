# Tests directory for koopable
