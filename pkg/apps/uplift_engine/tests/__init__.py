# Uplift Engine tests
