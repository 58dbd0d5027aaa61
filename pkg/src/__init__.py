# Localizer phenotype pipeline package
