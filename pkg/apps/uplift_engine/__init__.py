# Uplift Engine app
